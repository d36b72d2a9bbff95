//! Grad-CAM heatmaps of the attention layer and their comparison with ROI masks.
//!
//! Channel weights are spatial means of a gradient with respect to the
//! attention activations `A`. The raw map `sum_c w_c A^c` is min-max
//! normalized to `[0, 1]` (constant maps become all zeros) and bilinearly
//! resampled onto the mask grid with aligned corners. No ReLU is applied to
//! the raw map.
//!
//! During training the weights are constants: gradients of the attention
//! loss flow into `A` only.

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::losses;
use crate::model::ConvClassifier;
use crate::tape::{Graph, Var};
use crate::tensor::{Real, Tensor};

/// Axis-aligned box in pixel coordinates.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct BBox {
    pub row: usize,
    pub col: usize,
    pub height: usize,
    pub width: usize,
}

impl BBox {
    pub fn contains(&self, r: usize, c: usize) -> bool {
        r >= self.row && r < self.row + self.height && c >= self.col && c < self.col + self.width
    }

    pub fn area(&self) -> usize {
        self.height * self.width
    }

    pub fn center(&self) -> (f64, f64) {
        (
            self.row as f64 + (self.height as f64 - 1.0) / 2.0,
            self.col as f64 + (self.width as f64 - 1.0) / 2.0,
        )
    }

    /// True when the boxes share a pixel or touch within `gap` pixels.
    pub fn overlaps(&self, other: &BBox, gap: usize) -> bool {
        self.row < other.row + other.height + gap
            && other.row < self.row + self.height + gap
            && self.col < other.col + other.width + gap
            && other.col < self.col + self.width + gap
    }
}

/// Binary mask that is 1 exactly inside its box.
#[derive(Debug, Clone, PartialEq)]
pub struct RoiMask<F> {
    values: Tensor<F>,
    bbox: BBox,
}

impl<F: Real> RoiMask<F> {
    pub fn from_bbox(height: usize, width: usize, bbox: BBox) -> Result<Self> {
        if bbox.height == 0 || bbox.width == 0 || bbox.row + bbox.height > height || bbox.col + bbox.width > width {
            return Err(Error::Domain(format!(
                "mask box {bbox:?} must be nonempty and inside a {height}x{width} grid"
            )));
        }
        let mut values = Tensor::zeros(vec![height, width]);
        for r in bbox.row..bbox.row + bbox.height {
            values.data_mut()[r * width + bbox.col..r * width + bbox.col + bbox.width].fill(F::one());
        }
        Ok(RoiMask { values, bbox })
    }

    /// Recovers the box from a `(H, W)` or `(1, H, W)` tensor, checking that
    /// it is a filled rectangle of ones on zeros.
    pub fn from_tensor(values: &Tensor<F>) -> Result<Self> {
        let s = values.shape();
        let (h, w) = match s {
            [h, w] | [1, h, w] => (*h, *w),
            _ => return Err(Error::Corrupt(format!("mask must be 2-D, got shape {s:?}"))),
        };
        let data = values.data();
        let (mut r0, mut r1, mut c0, mut c1) = (usize::MAX, 0, usize::MAX, 0);
        for r in 0..h {
            for c in 0..w {
                let v = data[r * w + c];
                if v == F::one() {
                    r0 = r0.min(r);
                    r1 = r1.max(r);
                    c0 = c0.min(c);
                    c1 = c1.max(c);
                } else if v != F::zero() {
                    return Err(Error::Corrupt("mask values must be 0 or 1".into()));
                }
            }
        }
        if r0 == usize::MAX {
            return Err(Error::Corrupt("mask is empty".into()));
        }
        let bbox = BBox {
            row: r0,
            col: c0,
            height: r1 - r0 + 1,
            width: c1 - c0 + 1,
        };
        let mask = RoiMask::from_bbox(h, w, bbox)?;
        if mask.values.data() != data {
            return Err(Error::Corrupt("mask is not a filled rectangle".into()));
        }
        Ok(mask)
    }

    pub fn values(&self) -> &Tensor<F> {
        &self.values
    }

    pub fn bbox(&self) -> BBox {
        self.bbox
    }

    pub fn grid(&self) -> (usize, usize) {
        (self.values.shape()[0], self.values.shape()[1])
    }
}

/// Normalized heatmap with its native and current resolution.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionMap<F> {
    pub values: Tensor<F>,
    pub source_resolution: (usize, usize),
    pub target_resolution: (usize, usize),
}

impl<F: Real> AttentionMap<F> {
    pub fn new(values: Tensor<F>, source_resolution: (usize, usize)) -> Result<Self> {
        let s = values.shape();
        if s.len() != 2 {
            return Err(Error::Contract(format!("attention map must be 2-D, got {s:?}")));
        }
        let target_resolution = (s[0], s[1]);
        Ok(AttentionMap {
            values,
            source_resolution,
            target_resolution,
        })
    }
}

/// `w_c = (1/Z) sum_i grad[c, i]` over the `Z = h * w` spatial positions.
pub fn gradcam_weights<F: Real>(grad: &Tensor<F>) -> Result<Tensor<F>> {
    let s = grad.shape();
    if s.len() != 3 || s[1] * s[2] == 0 {
        return Err(Error::Contract(format!(
            "gradcam_weights: expected a (C, h, w) gradient with nonempty spatial extent, got {s:?}"
        )));
    }
    let z = s[1] * s[2];
    let denom = F::from_f64(z as f64);
    let w = grad
        .data()
        .chunks_exact(z)
        .map(|plane| plane.iter().copied().sum::<F>() / denom)
        .collect();
    Ok(Tensor::from_parts(vec![s[0]], w))
}

/// Normalized `sum_c w_c A^c` on the graph, `w` held constant.
pub fn gradcam_heatmap_var<F: Real>(g: &mut Graph<F>, activations: Var, weights: &Tensor<F>) -> Result<Var> {
    let s = g.shape(activations).to_vec();
    if s.len() != 3 || weights.shape() != [s[0]] {
        return Err(Error::shape("gradcam_heatmap", &s, weights.shape()));
    }
    let (c, h, w) = (s[0], s[1], s[2]);
    let flat = g.reshape(activations, &[c, h * w])?;
    let row = g.constant(weights.clone().reshape(vec![1, c])?)?;
    let raw = g.matmul(row, flat)?;
    let raw = g.reshape(raw, &[h, w])?;
    min_max_normalize(g, raw)
}

/// `(r - min) / (max - min)`, or zeros when the map is constant.
pub fn min_max_normalize<F: Real>(g: &mut Graph<F>, raw: Var) -> Result<Var> {
    let v = g.value(raw);
    // Negated so a NaN range also takes the constant branch.
    #[allow(clippy::neg_cmp_op_on_partial_ord)]
    if !(v.max_value() - v.min_value() > F::zero()) {
        return g.constant(Tensor::zeros(v.shape().to_vec()));
    }
    let hi = g.max(raw)?;
    let lo = g.min(raw)?;
    let shifted = g.sub(raw, lo)?;
    let range = g.sub(hi, lo)?;
    g.div(shifted, range)
}

pub fn gradcam_heatmap<F: Real>(activations: &Tensor<F>, weights: &Tensor<F>) -> Result<AttentionMap<F>> {
    let mut g = Graph::new();
    let a = g.constant(activations.clone())?;
    let map = gradcam_heatmap_var(&mut g, a, weights)?;
    let s = g.shape(map);
    let source = (s[0], s[1]);
    AttentionMap::new(g.value(map).clone(), source)
}

/// `(out, in)` matrix of aligned-corner linear interpolation weights.
pub fn interpolation_matrix<F: Real>(out_len: usize, in_len: usize) -> Tensor<F> {
    let mut m = Tensor::zeros(vec![out_len, in_len]);
    for i in 0..out_len {
        let src = if out_len > 1 {
            i as f64 * (in_len as f64 - 1.0) / (out_len as f64 - 1.0)
        } else {
            0.0
        };
        let lo = (src.floor() as usize).min(in_len - 1);
        let hi = (lo + 1).min(in_len - 1);
        let frac = src - lo as f64;
        m.data_mut()[i * in_len + lo] += F::from_f64(1.0 - frac);
        if hi != lo {
            m.data_mut()[i * in_len + hi] += F::from_f64(frac);
        }
    }
    m
}

/// Bilinear resampling on the graph as `U_rows . map . U_cols^T`.
pub fn upsample_bilinear_var<F: Real>(g: &mut Graph<F>, map: Var, target: (usize, usize)) -> Result<Var> {
    let s = g.shape(map).to_vec();
    if s.len() != 2 || target.0 < s[0] || target.1 < s[1] {
        return Err(Error::Domain(format!(
            "upsample target {target:?} must be at least the source size {s:?}"
        )));
    }
    if (s[0], s[1]) == target {
        return Ok(map);
    }
    let rows = g.constant(interpolation_matrix(target.0, s[0]))?;
    let cols_t = {
        let m: Tensor<F> = interpolation_matrix(target.1, s[1]);
        g.constant(transpose(&m))?
    };
    let tmp = g.matmul(rows, map)?;
    g.matmul(tmp, cols_t)
}

fn transpose<F: Real>(m: &Tensor<F>) -> Tensor<F> {
    let (r, c) = (m.shape()[0], m.shape()[1]);
    let mut out = Vec::with_capacity(r * c);
    for j in 0..c {
        for i in 0..r {
            out.push(m.data()[i * c + j]);
        }
    }
    Tensor::from_parts(vec![c, r], out)
}

pub fn upsample_bilinear<F: Real>(map: &AttentionMap<F>, target: (usize, usize)) -> Result<AttentionMap<F>> {
    let mut g = Graph::new();
    let m = g.constant(map.values.clone())?;
    let up = upsample_bilinear_var(&mut g, m, target)?;
    Ok(AttentionMap {
        values: g.value(up).clone(),
        source_resolution: map.source_resolution,
        target_resolution: target,
    })
}

/// Channel weights for one sample: the spatial mean of the gradient of the
/// true-class log-likelihood, i.e. of `-L_cls`, with respect to `A`.
pub fn class_weights<F: Real>(g: &Graph<F>, cls_loss: Var, activations: Var) -> Result<Tensor<F>> {
    let grad = g.gradient_wrt(cls_loss, activations)?;
    let w = gradcam_weights(&grad)?;
    Ok(w.map(|x| -x))
}

/// Upsampled student heatmap built on `g` from an existing forward pass.
pub fn attention_var<F: Real>(
    g: &mut Graph<F>,
    cls_loss: Var,
    activations: Var,
    target: (usize, usize),
) -> Result<Var> {
    let w = class_weights(g, cls_loss, activations)?;
    let map = gradcam_heatmap_var(g, activations, &w)?;
    upsample_bilinear_var(g, map, target)
}

/// Grad-CAM heatmap of `model` for `image` and its true `label`, on the mask grid.
pub fn student_attention<F: Real>(
    model: &ConvClassifier<F>,
    image: &Tensor<F>,
    label: usize,
    target: (usize, usize),
) -> Result<AttentionMap<F>> {
    let mut g = Graph::new();
    let bound = model.bind(&mut g, true)?;
    let x = g.constant(image.clone())?;
    let out = model.forward(&mut g, &bound, x)?;
    let cls = losses::cross_entropy(&mut g, out.logits, label)?;
    let up = attention_var(&mut g, cls, out.activations, target)?;
    let (_, h, w) = model.config().attention_shape();
    Ok(AttentionMap {
        values: g.value(up).clone(),
        source_resolution: (h, w),
        target_resolution: target,
    })
}

/// Share of heatmap mass inside the mask, 0 for an all-zero heatmap.
pub fn overlap_score<F: Real>(map: &AttentionMap<F>, mask: &RoiMask<F>) -> Result<f64> {
    if map.values.shape() != mask.values.shape() {
        return Err(Error::shape("overlap_score", map.values.shape(), mask.values.shape()));
    }
    let (mut inside, mut total) = (0.0, 0.0);
    for (&a, &m) in map.values.data().iter().zip(mask.values.data()) {
        total += a.as_f64();
        inside += a.as_f64() * m.as_f64();
    }
    Ok(if total > 0.0 { inside / total } else { 0.0 })
}

/// Binary 8-bit PGM (P5) with values scaled by 255.
pub fn encode_pgm<F: Real>(map: &AttentionMap<F>) -> Vec<u8> {
    let s = map.values.shape();
    let (h, w) = (s[0], s[1]);
    let mut out = format!("P5\n{w} {h}\n255\n").into_bytes();
    out.extend(
        map.values
            .data()
            .iter()
            .map(|v| (v.as_f64().clamp(0.0, 1.0) * 255.0).round() as u8),
    );
    out
}

pub fn write_pgm<F: Real>(map: &AttentionMap<F>, path: &Path) -> Result<()> {
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&encode_pgm(map)).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ConvNetConfig;

    fn t(shape: &[usize], data: &[f64]) -> Tensor<f64> {
        Tensor::from_f64(shape.to_vec(), data).unwrap()
    }

    #[test]
    fn weights_are_spatial_means() {
        let w = gradcam_weights(&Tensor::<f64>::full(vec![2, 3, 5], 1.0)).unwrap();
        assert_eq!(w.data(), &[1.0, 1.0]);
        let w = gradcam_weights(&t(&[1, 2, 2], &[1.0, 2.0, 3.0, 4.0])).unwrap();
        assert_eq!(w.data(), &[2.5]);
        let w = gradcam_weights(&Tensor::<f64>::zeros(vec![3, 2, 2])).unwrap();
        let map = gradcam_heatmap(&t(&[3, 2, 2], &[0.5; 12]), &w).unwrap();
        assert!(map.values.data().iter().all(|&v| v == 0.0));
        assert!(gradcam_weights(&Tensor::<f64>::zeros(vec![4])).is_err());
    }

    #[test]
    fn heatmap_examples() {
        let a = t(&[1, 2, 2], &[1.0, 3.0, 2.0, 5.0]);
        let map = gradcam_heatmap(&a, &t(&[1], &[1.0])).unwrap();
        assert_eq!(map.values.data(), &[0.0, 0.5, 0.25, 1.0]);

        let a = t(&[2, 1, 2], &[1.0, 0.0, 0.0, 1.0]);
        let map = gradcam_heatmap(&a, &t(&[2], &[1.0, -1.0])).unwrap();
        assert_eq!(map.values.data(), &[1.0, 0.0]);
        assert_eq!(map.source_resolution, (1, 2));

        let map = gradcam_heatmap(&a, &t(&[2], &[0.0, 0.0])).unwrap();
        assert_eq!(map.values.data(), &[0.0, 0.0]);

        assert!(gradcam_heatmap(&a, &t(&[3], &[1.0, 1.0, 1.0])).is_err());
    }

    #[test]
    fn upsample_examples() {
        let m = AttentionMap::new(t(&[2, 2], &[0.0, 1.0, 0.0, 1.0]), (2, 2)).unwrap();
        let same = upsample_bilinear(&m, (2, 2)).unwrap();
        assert_eq!(same.values, m.values);

        let up = upsample_bilinear(&m, (2, 4)).unwrap();
        let expected = [0.0, 1.0 / 3.0, 2.0 / 3.0, 1.0];
        for row in up.values.data().chunks(4) {
            for (got, want) in row.iter().zip(expected) {
                assert!((got - want).abs() < 1e-15);
            }
        }

        let one = AttentionMap::new(t(&[1, 1], &[0.7]), (1, 1)).unwrap();
        let up = upsample_bilinear(&one, (3, 5)).unwrap();
        assert!(up.values.data().iter().all(|&v| (v - 0.7).abs() < 1e-15));

        assert!(matches!(upsample_bilinear(&m, (1, 4)), Err(Error::Domain(_))));
    }

    #[test]
    fn overlap_examples() {
        let mask = RoiMask::<f64>::from_bbox(
            4,
            4,
            BBox {
                row: 0,
                col: 0,
                height: 2,
                width: 2,
            },
        )
        .unwrap();
        let inside = AttentionMap::new(mask.values().clone(), (4, 4)).unwrap();
        assert_eq!(overlap_score(&inside, &mask).unwrap(), 1.0);
        let uniform = AttentionMap::new(Tensor::full(vec![4, 4], 0.6), (4, 4)).unwrap();
        assert!((overlap_score(&uniform, &mask).unwrap() - 0.25).abs() < 1e-15);
        let zero = AttentionMap::new(Tensor::zeros(vec![4, 4]), (4, 4)).unwrap();
        assert_eq!(overlap_score(&zero, &mask).unwrap(), 0.0);
        let wrong = AttentionMap::new(Tensor::zeros(vec![4, 3]), (4, 3)).unwrap();
        assert!(overlap_score(&wrong, &mask).is_err());
    }

    #[test]
    fn mask_round_trips_through_tensor() {
        let b = BBox {
            row: 3,
            col: 2,
            height: 4,
            width: 8,
        };
        let m = RoiMask::<f32>::from_bbox(16, 16, b).unwrap();
        assert_eq!(m.values().sum_value(), 32.0);
        assert_eq!(RoiMask::from_tensor(m.values()).unwrap().bbox(), b);
        let mut holey = m.values().clone();
        holey.data_mut()[4 * 16 + 4] = 0.0;
        assert!(RoiMask::from_tensor(&holey).is_err());
        assert!(RoiMask::<f32>::from_bbox(16, 16, BBox { row: 10, col: 0, height: 8, width: 2 }).is_err());
    }

    #[test]
    fn zero_image_gives_zero_map() {
        let m = ConvClassifier::<f64>::init(ConvNetConfig::default()).unwrap();
        let map = student_attention(&m, &Tensor::zeros(vec![1, 64, 64]), 0, (64, 64)).unwrap();
        assert_eq!(map.values.shape(), &[64, 64]);
        assert!(map.values.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn pgm_layout() {
        let m = AttentionMap::new(t(&[1, 3], &[0.0, 0.5, 1.0]), (1, 3)).unwrap();
        let bytes = encode_pgm(&m);
        assert_eq!(&bytes[..11], b"P5\n3 1\n255\n");
        assert_eq!(&bytes[11..], &[0, 128, 255]);
    }
}
