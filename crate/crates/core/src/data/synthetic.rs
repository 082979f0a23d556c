//! Built-in synthetic "color-vs-shape" task.
//!
//! Two classes separated by redundant cues: class 0 renders a warm-hued,
//! horizontal-leaning bar, class 1 a cool-hued, vertical-leaning bar, both
//! over a dim noisy background with position, brightness and thickness
//! jitter. The task is easy enough for a desk-scale network to master yet
//! interacts meaningfully with both color and geometric augmentations.

use crate::rng::{stream, Rng};

use super::dataset::{DatasetSplit, SplitId};

fn hsv_to_rgb(h: f64, s: f64, v: f64) -> [f64; 3] {
    let h = h.rem_euclid(360.0) / 60.0;
    let i = h.floor() as i64 % 6;
    let f = h - h.floor();
    let p = v * (1.0 - s);
    let q = v * (1.0 - f * s);
    let t = v * (1.0 - (1.0 - f) * s);
    match i {
        0 => [v, t, p],
        1 => [q, v, p],
        2 => [p, v, t],
        3 => [p, q, v],
        4 => [t, p, v],
        _ => [v, p, q],
    }
}

/// Generates `n` images of size `hw` x `hw` (3 channels), classes
/// alternating 0, 1, 0, 1, ...
pub fn color_vs_shape(n: usize, hw: usize, seed: u64) -> DatasetSplit {
    let mut rng = Rng::derive(seed, &[stream::SYNTH_DATA]);
    let mut images = vec![0u8; n * 3 * hw * hw];
    let mut labels = vec![0u8; n];
    let plane = hw * hw;
    for i in 0..n {
        let class = (i % 2) as u8;
        labels[i] = class;
        // cue parameters
        let (hue, angle_deg) = if class == 0 {
            (rng.uniform_in(-20.0, 40.0), rng.uniform_in(-25.0, 25.0))
        } else {
            (rng.uniform_in(180.0, 230.0), rng.uniform_in(65.0, 115.0))
        };
        let value = rng.uniform_in(0.7, 0.95);
        let rgb = hsv_to_rgb(hue, 0.9, value);
        let angle = angle_deg.to_radians();
        let (dx, dy) = (angle.cos(), angle.sin());
        let cx = hw as f64 / 2.0 + rng.uniform_in(-1.5, 1.5);
        let cy = hw as f64 / 2.0 + rng.uniform_in(-1.5, 1.5);
        let half_len = hw as f64 * rng.uniform_in(0.3, 0.42);
        let half_thick = (hw as f64 / 10.0).max(1.0) * rng.uniform_in(0.8, 1.2);
        let bg = rng.uniform_in(0.05, 0.18);
        let img = &mut images[i * 3 * plane..(i + 1) * 3 * plane];
        for y in 0..hw {
            for x in 0..hw {
                let px = x as f64 - cx;
                let py = y as f64 - cy;
                // coordinates along / across the bar axis
                let along = px * dx + py * dy;
                let across = -px * dy + py * dx;
                let on_bar = along.abs() <= half_len && across.abs() <= half_thick;
                let noise = rng.uniform_in(-0.03, 0.03);
                for ch in 0..3 {
                    let v = if on_bar { rgb[ch] } else { bg } + noise;
                    img[ch * plane + y * hw + x] = (v.clamp(0.0, 1.0) * 255.0).round() as u8;
                }
            }
        }
    }
    DatasetSplit {
        images,
        n,
        c: 3,
        h: hw,
        w: hw,
        n_classes: 2,
        labels,
        split_id: SplitId::Full,
        provenance: format!("synthetic:color-vs-shape(n={n},hw={hw},seed={seed})"),
    }
}
