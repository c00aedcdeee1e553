//! Train-time augmentation: random scaling, crop (with deterministic
//! padding), horizontal flip, and color jitter on the image only.
//! Categorical labels resample nearest-neighbor; continuous labels
//! bilinearly. Flipping negates the x channel of normal maps.

use ndarray::{Array2, Array3};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::Sample;
use crate::grid::{bilinear_resize, Grid};
use crate::tasks::loss::{chw_to_rows, Label, IGNORE_LABEL};

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AugmentPolicy {
    #[serde(default = "default_scale_range")]
    pub scale_range: (f64, f64),
    /// Output size (height, width).
    pub crop: (usize, usize),
    #[serde(default = "default_true")]
    pub hflip: bool,
    /// Color jitter strength; 0 disables.
    #[serde(default)]
    pub jitter: f64,
}

fn default_scale_range() -> (f64, f64) {
    (0.5, 2.0)
}

fn default_true() -> bool {
    true
}

/// Concrete draws for one augmentation application.
#[derive(Debug, Clone, PartialEq)]
pub struct AugmentParams {
    pub scale: f64,
    /// Crop origin in the (padded) scaled canvas.
    pub crop_offset: (usize, usize),
    pub flip: bool,
    /// Per-channel (gain, bias) for the image.
    pub jitter: Option<[(f64, f64); 3]>,
}

impl AugmentParams {
    /// The parameters that leave a `size`-square sample unchanged.
    pub fn identity() -> Self {
        AugmentParams {
            scale: 1.0,
            crop_offset: (0, 0),
            flip: false,
            jitter: None,
        }
    }
}

/// Draw augmentation parameters for one sample.
pub fn sample_params(
    policy: &AugmentPolicy,
    source: (usize, usize),
    rng: &mut ChaCha8Rng,
) -> AugmentParams {
    let (lo, hi) = policy.scale_range;
    let scale = lo + rng.random::<f64>() * (hi - lo);
    let scaled_h = ((source.0 as f64 * scale).round() as usize).max(1);
    let scaled_w = ((source.1 as f64 * scale).round() as usize).max(1);
    let canvas_h = scaled_h.max(policy.crop.0);
    let canvas_w = scaled_w.max(policy.crop.1);
    let oy = if canvas_h > policy.crop.0 {
        (rng.random::<u64>() as usize) % (canvas_h - policy.crop.0 + 1)
    } else {
        0
    };
    let ox = if canvas_w > policy.crop.1 {
        (rng.random::<u64>() as usize) % (canvas_w - policy.crop.1 + 1)
    } else {
        0
    };
    let flip = policy.hflip && rng.random::<f64>() < 0.5;
    let jitter = if policy.jitter > 0.0 {
        let mut j = [(1.0, 0.0); 3];
        for slot in &mut j {
            let gain = 1.0 + policy.jitter * (rng.random::<f64>() * 2.0 - 1.0);
            let bias = policy.jitter * (rng.random::<f64>() - 0.5);
            *slot = (gain, bias);
        }
        Some(j)
    } else {
        None
    };
    AugmentParams {
        scale,
        crop_offset: (oy, ox),
        flip,
        jitter,
    }
}

fn resize_bilinear_2d(map: &Array2<f64>, out: (usize, usize)) -> Array2<f64> {
    let (h, w) = map.dim();
    if (h, w) == out {
        return map.clone();
    }
    let op = bilinear_resize(Grid::new(h, w), Grid::new(out.0, out.1));
    let rows = Array2::from_shape_vec((h * w, 1), map.iter().copied().collect()).unwrap();
    let resized = op.apply(&rows);
    Array2::from_shape_fn(out, |(y, x)| resized[[y * out.1 + x, 0]])
}

fn resize_nearest_u16(map: &Array2<u16>, out: (usize, usize)) -> Array2<u16> {
    let (h, w) = map.dim();
    if (h, w) == out {
        return map.clone();
    }
    Array2::from_shape_fn(out, |(y, x)| {
        let sy = (((y as f64 + 0.5) * h as f64 / out.0 as f64 - 0.5).round())
            .clamp(0.0, (h - 1) as f64) as usize;
        let sx = (((x as f64 + 0.5) * w as f64 / out.1 as f64 - 0.5).round())
            .clamp(0.0, (w - 1) as f64) as usize;
        map[[sy, sx]]
    })
}

fn pad_crop_f64(map: &Array2<f64>, offset: (usize, usize), out: (usize, usize), fill: f64) -> Array2<f64> {
    Array2::from_shape_fn(out, |(y, x)| {
        let sy = y + offset.0;
        let sx = x + offset.1;
        if sy < map.nrows() && sx < map.ncols() {
            map[[sy, sx]]
        } else {
            fill
        }
    })
}

fn pad_crop_u16(map: &Array2<u16>, offset: (usize, usize), out: (usize, usize), fill: u16) -> Array2<u16> {
    Array2::from_shape_fn(out, |(y, x)| {
        let sy = y + offset.0;
        let sx = x + offset.1;
        if sy < map.nrows() && sx < map.ncols() {
            map[[sy, sx]]
        } else {
            fill
        }
    })
}

fn flip_x_f64(map: &Array2<f64>) -> Array2<f64> {
    let (h, w) = map.dim();
    Array2::from_shape_fn((h, w), |(y, x)| map[[y, w - 1 - x]])
}

fn flip_x_u16(map: &Array2<u16>) -> Array2<u16> {
    let (h, w) = map.dim();
    Array2::from_shape_fn((h, w), |(y, x)| map[[y, w - 1 - x]])
}

/// Apply concrete augmentation parameters to a sample.
pub fn apply(sample: &Sample, policy_crop: (usize, usize), params: &AugmentParams) -> Sample {
    let (_, h, w) = sample.image.dim();
    let scaled = (
        ((h as f64 * params.scale).round() as usize).max(1),
        ((w as f64 * params.scale).round() as usize).max(1),
    );
    let out = policy_crop;

    // image channels: bilinear resize, pad+crop, flip, jitter
    let mut channels = Vec::with_capacity(3);
    for c in 0..3 {
        let plane = Array2::from_shape_fn((h, w), |(y, x)| sample.image[[c, y, x]]);
        let mut plane = resize_bilinear_2d(&plane, scaled);
        plane = pad_crop_f64(&plane, params.crop_offset, out, 0.0);
        if params.flip {
            plane = flip_x_f64(&plane);
        }
        if let Some(j) = params.jitter {
            let (gain, bias) = j[c];
            plane.mapv_inplace(|v| v * gain + bias);
        }
        channels.push(plane);
    }
    let image = Array3::from_shape_fn((3, out.0, out.1), |(c, y, x)| channels[c][[y, x]]);

    let mut labels = std::collections::BTreeMap::new();
    for (name, label) in &sample.labels {
        let new = match label {
            Label::Classes(m) | Label::Binary(m) => {
                let mut m = resize_nearest_u16(m, scaled);
                m = pad_crop_u16(&m, params.crop_offset, out, IGNORE_LABEL);
                if params.flip {
                    m = flip_x_u16(&m);
                }
                match label {
                    Label::Classes(_) => Label::Classes(m),
                    _ => Label::Binary(m),
                }
            }
            Label::Vector(v) => {
                let (c, _, _) = v.dim();
                let mut planes = Vec::with_capacity(c);
                for ch in 0..c {
                    let plane = Array2::from_shape_fn((h, w), |(y, x)| v[[ch, y, x]]);
                    let mut plane = resize_bilinear_2d(&plane, scaled);
                    plane = pad_crop_f64(&plane, params.crop_offset, out, 0.0);
                    if params.flip {
                        plane = flip_x_f64(&plane);
                        if ch == 0 {
                            // x component changes sign under mirroring
                            plane.mapv_inplace(|v| -v);
                        }
                    }
                    planes.push(plane);
                }
                Label::Vector(Array3::from_shape_fn((c, out.0, out.1), |(ch, y, x)| {
                    planes[ch][[y, x]]
                }))
            }
            Label::Scalar(m) => {
                let mut m = resize_bilinear_2d(m, scaled);
                m = pad_crop_f64(&m, params.crop_offset, out, 0.0);
                if params.flip {
                    m = flip_x_f64(&m);
                }
                Label::Scalar(m)
            }
        };
        labels.insert(name.clone(), new);
    }
    Sample { image, labels }
}

/// Draw parameters and apply them in one call.
pub fn augment(sample: &Sample, policy: &AugmentPolicy, rng: &mut ChaCha8Rng) -> Sample {
    let (_, h, w) = sample.image.dim();
    let params = sample_params(policy, (h, w), rng);
    apply(sample, policy.crop, &params)
}

// keep the unused helper warning away in non-test builds
#[allow(unused)]
fn _touch(v: &Array3<f64>) -> Array2<f64> {
    chw_to_rows(v)
}
