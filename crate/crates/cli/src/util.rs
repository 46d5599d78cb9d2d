//! Small harness utilities: ordered parallel map, wall clock, renderers.

use std::fs;
use std::path::Path;

use anyhow::{Context, Result};
use nsvit_core::finetune::Clock;
use nsvit_core::Mat;

/// Applies `f` to every item, possibly on several threads, returning
/// results in input order. Each item's computation is independent and
/// internally sequential, so the output does not depend on `threads`.
pub fn par_map<T, R, F>(items: Vec<T>, threads: usize, f: F) -> Vec<R>
where
    T: Send,
    R: Send,
    F: Fn(T) -> R + Sync,
{
    if threads <= 1 || items.len() <= 1 {
        return items.into_iter().map(f).collect();
    }
    let n = items.len();
    let mut slots: Vec<Option<R>> = (0..n).map(|_| None).collect();
    let work: Vec<(usize, T)> = items.into_iter().enumerate().collect();
    let queue = std::sync::Mutex::new(work);
    let results = std::sync::Mutex::new(&mut slots);
    std::thread::scope(|scope| {
        for _ in 0..threads.min(n) {
            scope.spawn(|| loop {
                let item = queue.lock().expect("queue lock").pop();
                match item {
                    Some((idx, value)) => {
                        let r = f(value);
                        results.lock().expect("results lock")[idx] = Some(r);
                    }
                    None => break,
                }
            });
        }
    });
    slots.into_iter().map(|s| s.expect("worker filled every slot")).collect()
}

pub struct WallClock {
    start: std::time::Instant,
}

impl WallClock {
    pub fn new() -> Self {
        WallClock { start: std::time::Instant::now() }
    }
}

impl Clock for WallClock {
    fn now_seconds(&self) -> f64 {
        self.start.elapsed().as_secs_f64()
    }
}

/// Writes a channel-major image (values nominally `[0, 1]`) as binary PPM.
/// Pixels are clamped; single-channel images are replicated to gray.
pub fn write_ppm(path: &Path, image: &[f64], channels: usize, h: usize, w: usize) -> Result<()> {
    let mut out = format!("P6\n{w} {h}\n255\n").into_bytes();
    for y in 0..h {
        for x in 0..w {
            for c in 0..3 {
                let ch = if channels == 3 { c } else { 0 };
                let v = image[ch * h * w + y * w + x];
                out.push((v.clamp(0.0, 1.0) * 255.0) as u8);
            }
        }
    }
    fs::write(path, out).with_context(|| format!("writing {}", path.display()))
}

/// Renders a heat grid as a standalone SVG with a blue-to-red ramp.
pub fn write_svg_heatmap(path: &Path, alphas: &[f64], cells: &Mat) -> Result<()> {
    let n = alphas.len();
    let cell = 24usize;
    let margin = 40usize;
    let size = margin + n * cell + 10;
    let max = cells.max_abs().max(1e-12);
    let mut svg = format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{size}\" height=\"{size}\">\n"
    );
    for i in 0..n {
        for j in 0..n {
            let t = (cells.at(i, j) / max).clamp(0.0, 1.0);
            let r = (255.0 * t) as u8;
            let b = (255.0 * (1.0 - t)) as u8;
            // row i = alpha1 grows upward from the bottom-left origin
            let x = margin + j * cell;
            let y = margin + (n - 1 - i) * cell;
            svg.push_str(&format!(
                "<rect x=\"{x}\" y=\"{y}\" width=\"{cell}\" height=\"{cell}\" \
                 fill=\"rgb({r},0,{b})\"><title>a1={:.1} a2={:.1} mse={:.5}</title></rect>\n",
                alphas[i],
                alphas[j],
                cells.at(i, j)
            ));
        }
    }
    svg.push_str("</svg>\n");
    fs::write(path, svg).with_context(|| format!("writing {}", path.display()))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn par_map_preserves_order_regardless_of_threads() {
        let items: Vec<usize> = (0..37).collect();
        let seq = par_map(items.clone(), 1, |x| x * x);
        let par = par_map(items, 4, |x| x * x);
        assert_eq!(seq, par);
        assert_eq!(seq[6], 36);
    }
}
