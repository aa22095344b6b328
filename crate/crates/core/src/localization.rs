//! Gradient × input localization heatmaps.
//!
//! For one instance, the class score (the logit for class 1, its negation
//! for class 0) is back-propagated to a recorded activation `X` of shape
//! `[c, m, n]`, and the contribution map is `T[h,w] = Σ_c dX[c,h,w]·X[c,h,w]`.
//! `T` is rectified and scaled so its largest positive value becomes 255
//! (`P`), bilinearly upsampled to the slice size (`P*`) and blended with the
//! slice as `H = 0.6·R + 0.3·P*`.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use crate::autodiff::Graph;
use crate::error::{Error, Result};
use crate::model::{Bag, MimsModel};
use crate::nn::{resize_tensor, Mode};
use crate::tensor::{Real, Tensor};

/// Activation used when no layer is named: the stem output.
pub const DEFAULT_LAYER: &str = "primary";

/// An 8-bit single-channel image in row-major order.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct GrayImage {
    pub height: usize,
    pub width: usize,
    pub pixels: Vec<u8>,
}

impl GrayImage {
    pub fn new(height: usize, width: usize, pixels: Vec<u8>) -> Result<Self> {
        if pixels.len() != height * width {
            return Err(Error::invalid(format!(
                "image of {height}x{width} needs {} pixels, got {}",
                height * width,
                pixels.len()
            )));
        }
        Ok(GrayImage { height, width, pixels })
    }

    pub fn get(&self, y: usize, x: usize) -> u8 {
        self.pixels[y * self.width + x]
    }

    /// First maximum in row-major order, as `(y, x)`.
    pub fn argmax(&self) -> (usize, usize) {
        let mut best = 0;
        for (i, &p) in self.pixels.iter().enumerate() {
            if p > self.pixels[best] {
                best = i;
            }
        }
        (best / self.width, best % self.width)
    }

    pub fn to_pgm(&self) -> Vec<u8> {
        let mut out = format!("P5\n{} {}\n255\n", self.width, self.height).into_bytes();
        out.extend_from_slice(&self.pixels);
        out
    }
}

#[derive(Clone, Debug)]
pub struct ContributionMap {
    /// Signed contributions, `[m, n]`.
    pub t: Tensor,
    pub p: GrayImage,
    pub source_layer: String,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct HeatmapOverlay {
    pub p_star: GrayImage,
    pub h: GrayImage,
}

impl HeatmapOverlay {
    /// Colour composite: `P*` scaled by 0.3 rides the red channel on top of
    /// the dimmed slice, `red = H`, `green = blue = round(0.6·R)`.
    pub fn to_ppm(&self, r: &GrayImage) -> Vec<u8> {
        let mut out = format!("P6\n{} {}\n255\n", self.h.width, self.h.height).into_bytes();
        for (&h, &rv) in self.h.pixels.iter().zip(&r.pixels) {
            let dim = ((6 * rv as u32 + 5) / 10) as u8;
            out.extend_from_slice(&[h, dim, dim]);
        }
        out
    }
}

/// Round half up of a nonnegative value.
fn round_half_up(v: f64) -> f64 {
    (v + 0.5).floor()
}

/// Negatives become 0, the largest positive value becomes 255 and the rest
/// scale linearly, rounded half up. An all-nonpositive map stays all zero.
pub fn quantize_rectify(t: &Tensor) -> Result<GrayImage> {
    if t.ndim() != 2 {
        return Err(Error::InvalidShape {
            shape: t.shape().to_vec(),
            reason: "contribution map must be [m, n]".into(),
        });
    }
    let max = t.data().iter().fold(0.0f64, |m, &v| m.max(v as f64));
    let pixels = t
        .data()
        .iter()
        .map(|&v| {
            let v = v as f64;
            if v <= 0.0 || max <= 0.0 {
                0
            } else {
                round_half_up(v / max * 255.0).min(255.0) as u8
            }
        })
        .collect();
    GrayImage::new(t.shape()[0], t.shape()[1], pixels)
}

/// The slice as an 8-bit image: `round_half_up(clamp(x, 0, 1)·255)` of
/// channel 0 of a `[c, h, w]` instance.
pub fn slice_image(instance: &Tensor) -> Result<GrayImage> {
    let s = instance.shape();
    if s.len() != 3 {
        return Err(Error::InvalidShape {
            shape: s.to_vec(),
            reason: "instance must be [c, h, w]".into(),
        });
    }
    let (h, w) = (s[1], s[2]);
    let pixels = instance.data()[..h * w]
        .iter()
        .map(|&v| round_half_up((v as f64).clamp(0.0, 1.0) * 255.0) as u8)
        .collect();
    GrayImage::new(h, w, pixels)
}

/// `P* = bilinear(P)` at the slice size, rounded and clamped to [0, 255];
/// `H = round_half_up(0.6·R + 0.3·P*)` computed exactly in integers.
pub fn upsample_overlay(p: &GrayImage, r: &GrayImage) -> Result<HeatmapOverlay> {
    if r.height < p.height || r.width < p.width {
        return Err(Error::invalid(format!(
            "slice {}x{} is smaller than the contribution map {}x{}",
            r.height, r.width, p.height, p.width
        )));
    }
    let pf = Tensor::new(&[p.height, p.width], p.pixels.iter().map(|&v| v as Real).collect())?;
    let up = resize_tensor(&pf, r.height, r.width)?;
    let p_star: Vec<u8> = up
        .data()
        .iter()
        .map(|&v| round_half_up((v as f64).clamp(0.0, 255.0)) as u8)
        .collect();
    let h = p_star
        .iter()
        .zip(&r.pixels)
        .map(|(&ps, &rv)| ((6 * rv as u32 + 3 * ps as u32 + 5) / 10).min(255) as u8)
        .collect();
    Ok(HeatmapOverlay {
        p_star: GrayImage::new(r.height, r.width, p_star)?,
        h: GrayImage::new(r.height, r.width, h)?,
    })
}

/// `Σ_c d·x` over the channel axis of `[1, c, m, n]` or `[c, m, n]` tensors.
pub fn channel_contribution(grad: &Tensor, x: &Tensor) -> Result<Tensor> {
    if grad.shape() != x.shape() {
        return Err(Error::ShapeMismatch {
            op: "contribution",
            lhs: grad.shape().to_vec(),
            rhs: x.shape().to_vec(),
        });
    }
    let s = x.shape();
    let (c, m, n) = match s {
        [1, c, m, n] | [c, m, n] => (*c, *m, *n),
        _ => {
            return Err(Error::InvalidShape {
                shape: s.to_vec(),
                reason: "expected [1, c, m, n] or [c, m, n]".into(),
            })
        }
    };
    let mut t = vec![0.0f64; m * n];
    for ch in 0..c {
        let off = ch * m * n;
        for (i, acc) in t.iter_mut().enumerate() {
            *acc += grad.data()[off + i] as f64 * x.data()[off + i] as f64;
        }
    }
    Tensor::new(&[m, n], t.into_iter().map(|v| v as Real).collect())
}

/// Sign of the backward seed that makes the gradient point toward `class`.
fn class_sign(class: u8) -> Result<Real> {
    match class {
        0 => Ok(-1.0),
        1 => Ok(1.0),
        c => Err(Error::invalid(format!("class {c} is not 0 or 1"))),
    }
}

/// Contribution map of instance `index` of `bag` at `layer` (`input`,
/// `stem.{i}` or `primary`), computed on the single-instance sub-bag in
/// eval mode.
pub fn contribution_map(model: &MimsModel, bag: &Bag, index: usize, layer: &str, class: u8) -> Result<ContributionMap> {
    let sign = class_sign(class)?;
    let sub = bag.instance_bag(index)?;
    let mut g = Graph::new();
    let out = model.forward_with(&mut g, &sub, Mode::Eval, layer == "input")?;
    let x = out.tap(layer)?;
    g.backward_seeded(out.logit, &[sign])?;
    let value = g.value(x).clone();
    let grad = g.grad(x).unwrap_or_else(|| value.map(|_| 0.0));
    let t = channel_contribution(&grad, &value)?;
    let p = quantize_rectify(&t)?;
    Ok(ContributionMap {
        t,
        p,
        source_layer: layer.to_string(),
    })
}

/// One emitted instance of [`localize_bag`].
#[derive(Clone, Debug)]
pub struct Emitted {
    pub instance: usize,
    /// Probability of the requested class for the single-instance sub-bag.
    pub probability: Real,
    pub map: ContributionMap,
    pub slice: GrayImage,
    pub overlay: HeatmapOverlay,
}

/// Overlays for every instance whose single-instance prediction favours
/// `class` with probability above 0.5.
pub fn localize_bag(model: &MimsModel, bag: &Bag, class: u8, layer: &str) -> Result<Vec<Emitted>> {
    class_sign(class)?;
    let probs = model.forward_instancewise(bag)?;
    let mut out = Vec::new();
    for (i, &p1) in probs.iter().enumerate() {
        let p = if class == 1 { p1 } else { 1.0 - p1 };
        if p <= 0.5 {
            continue;
        }
        let map = contribution_map(model, bag, i, layer, class)?;
        let slice = slice_image(&bag.instances[i])?;
        let overlay = upsample_overlay(&map.p, &slice)?;
        out.push(Emitted {
            instance: i,
            probability: p,
            map,
            slice,
            overlay,
        });
    }
    Ok(out)
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(bytes).map_err(|e| Error::io(path, e))
}

/// Writes `<bag>_s<i>_heat.pgm`, `<bag>_s<i>_overlay.pgm` and
/// `<bag>_s<i>_overlay.ppm`; returns the paths in that order per instance.
pub fn write_emitted(bag_id: &str, emitted: &[Emitted], dir: &Path) -> Result<Vec<PathBuf>> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut paths = Vec::new();
    for e in emitted {
        let stem = format!("{bag_id}_s{}", e.instance);
        let heat = dir.join(format!("{stem}_heat.pgm"));
        write_file(&heat, &e.overlay.p_star.to_pgm())?;
        let gray = dir.join(format!("{stem}_overlay.pgm"));
        write_file(&gray, &e.overlay.h.to_pgm())?;
        let color = dir.join(format!("{stem}_overlay.ppm"));
        write_file(&color, &e.overlay.to_ppm(&e.slice))?;
        paths.extend([heat, gray, color]);
    }
    Ok(paths)
}

/// Parses a binary P5 image.
pub fn read_pgm(path: &Path) -> Result<GrayImage> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let bad = |reason: &str| Error::Format {
        path: path.to_path_buf(),
        reason: reason.to_string(),
    };
    let mut fields = Vec::new();
    let mut pos = 0;
    while fields.len() < 4 {
        while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(bad("truncated header"));
        }
        fields.push(String::from_utf8_lossy(&bytes[start..pos]).to_string());
    }
    if fields[0] != "P5" || fields[3] != "255" {
        return Err(bad("not an 8-bit P5 image"));
    }
    let width: usize = fields[1].parse().map_err(|_| bad("bad width"))?;
    let height: usize = fields[2].parse().map_err(|_| bad("bad height"))?;
    let data = bytes.get(pos + 1..).ok_or_else(|| bad("missing pixel data"))?;
    if data.len() != width * height {
        return Err(bad("pixel count does not match the header"));
    }
    GrayImage::new(height, width, data.to_vec())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::ExperimentConfig;

    fn t2(rows: &[&[Real]]) -> Tensor {
        let data: Vec<Real> = rows.iter().flat_map(|r| r.iter().copied()).collect();
        Tensor::new(&[rows.len(), rows[0].len()], data).unwrap()
    }

    #[test]
    fn quantize_example() {
        let p = quantize_rectify(&t2(&[&[-1.0, 2.0], &[4.0, 0.0]])).unwrap();
        assert_eq!(p.pixels, vec![0, 128, 255, 0]);
    }

    #[test]
    fn quantize_degenerate_maps() {
        let p = quantize_rectify(&t2(&[&[-1.0, -2.0]])).unwrap();
        assert_eq!(p.pixels, vec![0, 0]);
        let p = quantize_rectify(&t2(&[&[0.0, 0.3, 0.0]])).unwrap();
        assert_eq!(p.pixels, vec![0, 255, 0]);
    }

    #[test]
    fn quantize_is_idempotent_on_quantized_maps() {
        let t = t2(&[&[0.0, 17.0], &[255.0, 128.0]]);
        let p = quantize_rectify(&t).unwrap();
        assert_eq!(p.pixels, vec![0, 17, 255, 128]);
    }

    #[test]
    fn overlay_examples() {
        let r = GrayImage::new(4, 4, vec![255; 16]).unwrap();
        let zero = GrayImage::new(2, 2, vec![0; 4]).unwrap();
        let o = upsample_overlay(&zero, &r).unwrap();
        assert!(o.h.pixels.iter().all(|&v| v == 153));
        let full = GrayImage::new(2, 2, vec![255; 4]).unwrap();
        let o = upsample_overlay(&full, &r).unwrap();
        assert!(o.p_star.pixels.iter().all(|&v| v == 255));
        assert!(o.h.pixels.iter().all(|&v| v == 230));
        assert_eq!((o.p_star.height, o.p_star.width), (4, 4));
    }

    #[test]
    fn overlay_rejects_small_slice() {
        let r = GrayImage::new(1, 1, vec![0]).unwrap();
        let p = GrayImage::new(2, 2, vec![0; 4]).unwrap();
        assert!(upsample_overlay(&p, &r).is_err());
    }

    #[test]
    fn single_positive_cell_maps_to_255() {
        let mut d = vec![0.0; 2 * 3 * 3];
        let mut x = vec![0.0; 2 * 3 * 3];
        d[9 + 4] = 2.0;
        x[9 + 4] = 1.5;
        let grad = Tensor::new(&[2, 3, 3], d).unwrap();
        let xs = Tensor::new(&[2, 3, 3], x).unwrap();
        let t = channel_contribution(&grad, &xs).unwrap();
        let p = quantize_rectify(&t).unwrap();
        assert_eq!(p.pixels, vec![0, 0, 0, 0, 255, 0, 0, 0, 0]);
    }

    #[test]
    fn slice_image_clamps() {
        let x = Tensor::new(&[1, 1, 4], vec![-0.5, 0.0, 0.5, 1.5]).unwrap();
        assert_eq!(slice_image(&x).unwrap().pixels, vec![0, 0, 128, 255]);
    }

    #[test]
    fn pgm_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let img = GrayImage::new(2, 3, vec![0, 10, 20, 30, 40, 255]).unwrap();
        let path = dir.path().join("a.pgm");
        fs::write(&path, img.to_pgm()).unwrap();
        assert_eq!(read_pgm(&path).unwrap(), img);
    }

    #[test]
    fn unknown_layer_is_an_error() {
        let cfg = ExperimentConfig {
            variant: crate::config::Variant::MiPre,
            ..ExperimentConfig::default()
        };
        let model = MimsModel::build(&cfg).unwrap();
        let bag = Bag::new("b", vec![Tensor::full(&[1, 16, 16], 0.5).unwrap()], 1).unwrap();
        let err = contribution_map(&model, &bag, 0, "nope", 1).unwrap_err();
        assert!(err.to_string().contains("nope"), "{err}");
        let map = contribution_map(&model, &bag, 0, DEFAULT_LAYER, 1).unwrap();
        assert_eq!(map.t.shape(), &[2, 2]);
    }
}
