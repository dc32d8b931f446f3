//! Class activation maps and MPP spatial-prediction maps, written as PPM.
//!
//! Maps are computed at feature resolution, passed through ReLU (CAM only),
//! bilinearly upsampled to the input size and then min-max normalized, so the
//! emitted values span exactly `[0, 1]`. A constant map is emitted as zeros.
//!
//! Colormap ("hot", 766 levels): `L = round(765 v)`, red = `min(L, 255)`,
//! green = `clamp(L − 255, 0, 255)`, blue = `clamp(L − 510, 0, 255)`. It runs
//! black → red → yellow → white and is inverted exactly by `L = r + g + b`.

use std::fmt;
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::models::{Backbone, SsiaNet};
use crate::nn::Mode;
use crate::tensor::{bilinear_resize_values, Tape, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Source {
    Cam,
    /// Spatial prediction of the block whose prediction side is this stage.
    MppStage(usize),
}

impl fmt::Display for Source {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Source::Cam => f.write_str("cam"),
            Source::MppStage(n) => write!(f, "mpp-stage-{n}"),
        }
    }
}

/// Row-major `h × w` values in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Heatmap {
    pub height: usize,
    pub width: usize,
    pub values: Vec<f64>,
    pub source: Source,
    /// Size of the map before upsampling.
    pub native: (usize, usize),
}

/// Maps values to `[0, 1]` by min-max; constant input gives zeros.
pub fn min_max_normalize(values: &[f64]) -> Vec<f64> {
    let lo = values.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let span = hi - lo;
    if span <= 0.0 || !span.is_finite() {
        return vec![0.0; values.len()];
    }
    values.iter().map(|v| ((v - lo) / span).clamp(0.0, 1.0)).collect()
}

/// `relu(Σ_c w_c · f_c)` for features `[C, h, w]` and class weights `[C]`.
pub fn cam_map(features: &[f64], weights: &[f64], h: usize, w: usize) -> Result<Vec<f64>> {
    let c = weights.len();
    if features.len() != c * h * w {
        return Err(Error::Viz(format!(
            "features hold {} values, expected {c}×{h}×{w}",
            features.len()
        )));
    }
    let mut out = vec![0.0; h * w];
    for (plane, &wc) in features.chunks_exact(h * w).zip(weights) {
        for (o, &f) in out.iter_mut().zip(plane) {
            *o += wc * f;
        }
    }
    Ok(out.into_iter().map(|v| v.max(0.0)).collect())
}

fn finish(raw: Vec<f64>, native: (usize, usize), out: (usize, usize), source: Source) -> Heatmap {
    let up = bilinear_resize_values(&raw, 1, native.0, native.1, out.0, out.1);
    Heatmap {
        height: out.0,
        width: out.1,
        values: min_max_normalize(&up),
        source,
        native,
    }
}

/// CAM of one image `[1, 3, H, W]` for `class`, from the last stage output
/// and the linear head on its global average.
pub fn cam(model: &mut Backbone<f32>, image: &Tensor<f32>, class: usize) -> Result<Heatmap> {
    let (hin, win) = single_image(image)?;
    let classes = model.num_classes();
    if class >= classes {
        return Err(Error::Viz(format!("class {class} out of range for {classes} classes")));
    }
    let mut tape = Tape::new();
    let x = tape.constant(image.clone());
    let out = model.forward_taps(&mut tape, x, Mode::Eval)?;
    let last = *out.taps.last().ok_or_else(|| Error::Viz("model exposes no stage outputs".into()))?;
    let s = tape.shape(last).to_vec();
    let (c, h, w) = (s[1], s[2], s[3]);
    if model.fc.input_width() != c {
        return Err(Error::Viz(format!(
            "head reads {} features but the last stage has {c} channels; CAM needs a linear head on pooled last-stage features",
            model.fc.input_width()
        )));
    }
    let features: Vec<f64> = tape.value(last).data().iter().map(|&v| v as f64).collect();
    let weights: Vec<f64> = (0..c).map(|i| model.fc.weight.value.data()[i * classes + class] as f64).collect();
    let raw = cam_map(&features, &weights, h, w)?;
    Ok(finish(raw, (h, w), (hin, win), Source::Cam))
}

/// Spatial predictions of every attached block for one image, in block order.
pub fn mpp_heatmaps(net: &mut SsiaNet<f32>, image: &Tensor<f32>) -> Result<Vec<Heatmap>> {
    let (hin, win) = single_image(image)?;
    let mut tape = Tape::new();
    let x = tape.constant(image.clone());
    let out = net.backbone.forward_taps(&mut tape, x, Mode::Eval)?;
    let mut maps = Vec::with_capacity(net.blocks.len());
    for block in &mut net.blocks {
        let x_l = *out
            .taps
            .get(block.prediction_stage.wrapping_sub(1))
            .ok_or_else(|| Error::Viz(format!("block {} has no prediction tap", block.number)))?;
        let cfg = block.cfg.clone();
        let p = block.mpp.predict(&mut tape, x_l, &cfg, Mode::Eval)?;
        let s = tape.shape(p.f_s).to_vec();
        let raw: Vec<f64> = tape.value(p.f_s).data().iter().map(|&v| v as f64).collect();
        maps.push(finish(raw, (s[2], s[3]), (hin, win), Source::MppStage(block.prediction_stage)));
    }
    Ok(maps)
}

fn single_image(image: &Tensor<f32>) -> Result<(usize, usize)> {
    match image.shape() {
        [1, 3, h, w] => Ok((*h, *w)),
        s => Err(Error::Viz(format!("expected one image [1,3,H,W], got {s:?}"))),
    }
}

pub fn colormap(v: f64) -> [u8; 3] {
    let l = (v.clamp(0.0, 1.0) * 765.0).round() as i32;
    let ch = |x: i32| x.clamp(0, 255) as u8;
    [ch(l), ch(l - 255), ch(l - 510)]
}

pub fn encode_ppm(map: &Heatmap) -> Vec<u8> {
    let mut out = format!("P6\n{} {}\n255\n", map.width, map.height).into_bytes();
    for &v in &map.values {
        out.extend_from_slice(&colormap(v));
    }
    out
}

pub fn write_image(map: &Heatmap, path: &Path) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| Error::io(format!("creating {}", dir.display()), e))?;
    }
    fs::write(path, encode_ppm(map)).map_err(|e| Error::io(format!("writing {}", path.display()), e))
}

/// Reads a PPM written by [`write_image`] back to `(width, height, levels/765)`.
pub fn read_image(path: &Path) -> Result<(usize, usize, Vec<f64>)> {
    let bytes = fs::read(path).map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
    let bad = || Error::Viz(format!("{} is not a P6 file from this tool", path.display()));
    let mut fields = Vec::new();
    let mut pos = 0;
    while fields.len() < 4 {
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        fields.push(std::str::from_utf8(&bytes[start..pos]).map_err(|_| bad())?.to_string());
        pos += 1;
    }
    if fields[0] != "P6" || fields[3] != "255" {
        return Err(bad());
    }
    let w: usize = fields[1].parse().map_err(|_| bad())?;
    let h: usize = fields[2].parse().map_err(|_| bad())?;
    let px = bytes.get(pos..).ok_or_else(bad)?;
    if px.len() != w * h * 3 {
        return Err(bad());
    }
    let values = px
        .chunks_exact(3)
        .map(|c| (c[0] as u32 + c[1] as u32 + c[2] as u32) as f64 / 765.0)
        .collect();
    Ok((w, h, values))
}

/// Value a heatmap entry has after a write/read cycle.
pub fn quantize(v: f64) -> f64 {
    (v.clamp(0.0, 1.0) * 765.0).round() / 765.0
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::{Arch, ConnectionScheme, TargetSpatial};
    use crate::nn::Module;
    use crate::ssia::BlockConfig;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn hand_computed_two_channel_cam() {
        // channel 0 = [[1,2],[3,4]], channel 1 = [[4,0],[1,-2]], weights (0.5, -1)
        let f = [1.0, 2.0, 3.0, 4.0, 4.0, 0.0, 1.0, -2.0];
        let raw = cam_map(&f, &[0.5, -1.0], 2, 2).unwrap();
        // 0.5 − 4 = −3.5 → 0; 1; 1.5 − 1 = 0.5; 2 + 2 = 4
        assert_eq!(raw, vec![0.0, 1.0, 0.5, 4.0]);
        let n = min_max_normalize(&raw);
        let want = [0.0, 0.25, 0.125, 1.0];
        for (a, b) in n.iter().zip(want) {
            assert!((a - b).abs() < 1e-6);
        }
        assert!(cam_map(&f, &[1.0], 2, 2).is_err());
    }

    #[test]
    fn cam_linearity_and_constant_guard() {
        let f = [0.0, 2.0, 4.0, 6.0, 9.0, 9.0, 9.0, 9.0];
        let raw = cam_map(&f, &[3.0, 0.0], 2, 2).unwrap();
        assert_eq!(raw, vec![0.0, 6.0, 12.0, 18.0]);
        assert_eq!(min_max_normalize(&raw), vec![0.0, 1.0 / 3.0, 2.0 / 3.0, 1.0]);
        let flat = cam_map(&[5.0; 8], &[1.0, 1.0], 2, 2).unwrap();
        assert_eq!(min_max_normalize(&flat), vec![0.0; 4]);
    }

    #[test]
    fn colormap_endpoints_on_a_ramp() {
        let map = Heatmap {
            height: 2,
            width: 2,
            values: vec![0.0, 1.0 / 3.0, 2.0 / 3.0, 1.0],
            source: Source::Cam,
            native: (2, 2),
        };
        let bytes = encode_ppm(&map);
        let header = b"P6\n2 2\n255\n";
        assert_eq!(&bytes[..header.len()], header);
        assert_eq!(
            &bytes[header.len()..],
            &[0, 0, 0, 255, 0, 0, 255, 255, 0, 255, 255, 255]
        );
        assert_eq!(encode_ppm(&map), bytes);
    }

    fn image(seed: u64) -> Tensor<f32> {
        Tensor::randn(&[1, 3, 32, 32], 1.0, &mut ChaCha8Rng::seed_from_u64(seed))
    }

    #[test]
    fn cam_on_a_backbone_is_normalized_and_read_only() {
        let mut model = Backbone::<f32>::new(Arch::ResnetTiny8, 10, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        let before = model.clone();
        let m = cam(&mut model, &image(2), 3).unwrap();
        assert_eq!((m.height, m.width, m.native), (32, 32, (4, 4)));
        let hi = m.values.iter().copied().fold(0.0, f64::max);
        let lo = m.values.iter().copied().fold(1.0, f64::min);
        assert!(hi == 1.0 && lo == 0.0);
        let mut same = true;
        before.visit_buffers(&mut |b| {
            model.visit_buffers(&mut |a| {
                if a.name == b.name && a.value != b.value {
                    same = false;
                }
            })
        });
        assert!(same);
        assert!(cam(&mut model, &image(2), 10).is_err());
        assert!(cam(&mut model, &Tensor::zeros(&[2, 3, 32, 32]), 0).is_err());
    }

    #[test]
    fn mpp_maps_per_block_and_round_trip() {
        let backbone = Backbone::<f32>::new(Arch::ResnetTiny8, 10, &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
        let cfg = BlockConfig {
            hidden: 8,
            ..BlockConfig::default()
        };
        let mut net = SsiaNet::with_blocks(
            backbone,
            ConnectionScheme::Cascaded,
            (32, 32),
            &TargetSpatial::Auto,
            vec![cfg; 3],
            &mut ChaCha8Rng::seed_from_u64(4),
        )
        .unwrap();
        let maps = mpp_heatmaps(&mut net, &image(5)).unwrap();
        assert_eq!(maps.len(), 3);
        let natives: Vec<_> = maps.iter().map(|m| m.native).collect();
        assert_eq!(natives, vec![(16, 16), (8, 8), (4, 4)]);
        assert_eq!(maps[1].source.to_string(), "mpp-stage-2");

        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("test").join("0_mpp-stage-1.ppm");
        write_image(&maps[0], &p).unwrap();
        let (w, h, vals) = read_image(&p).unwrap();
        assert_eq!((w, h), (32, 32));
        let want: Vec<f64> = maps[0].values.iter().map(|&v| quantize(v)).collect();
        assert_eq!(vals, want);

        for b in &mut net.blocks {
            b.visit_params_mut(&mut |p| p.value.fill(0.0));
        }
        let flat = mpp_heatmaps(&mut net, &image(5)).unwrap();
        assert!(flat.iter().all(|m| m.values.iter().all(|&v| v == 0.0)));
    }
}
