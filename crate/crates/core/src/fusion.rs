//! Hybrid point-wise fusion network.
//!
//! Radar and image features pass through separate shared MLP branches.
//! First-layer outputs of both branches form the low-level fusion, last-layer
//! outputs the high-level fusion. Their concatenation runs through the fused
//! stack, whose output is max-pooled per object group and broadcast back.
//! The head sees `[low, high, global]` and emits
//! `[range logits | azimuth logits | Δr, Δa]` per point.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::association::CandidateSet;
use crate::autograd::{NodeId, Tape};
use crate::codec::CodecConfig;
use crate::error::{Error, Result};
use crate::features::FrameFeatures;
use crate::rng::{stream, StreamRng};
use crate::scalar::Scalar;
use crate::sim::Frame;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ArchConfig {
    pub c_radar_in: usize,
    pub c_image_in: usize,
    pub branch_dims: Vec<usize>,
    pub fused_dims: Vec<usize>,
    pub head_dims: Vec<usize>,
    pub cls_out: usize,
    pub reg_out: usize,
    /// When false the image branch receives zeros (radar-only variant).
    pub use_image: bool,
}

impl Default for ArchConfig {
    fn default() -> Self {
        Self {
            c_radar_in: 32,
            c_image_in: 32,
            branch_dims: vec![64, 128],
            fused_dims: vec![256],
            head_dims: vec![128],
            cls_out: 16,
            reg_out: 2,
            use_image: true,
        }
    }
}

impl ArchConfig {
    /// A small network for gradient checks.
    pub fn small() -> Self {
        Self {
            c_radar_in: 3,
            c_image_in: 2,
            branch_dims: vec![4, 3],
            fused_dims: vec![5],
            head_dims: vec![4],
            cls_out: 5,
            reg_out: 2,
            use_image: true,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.branch_dims.is_empty() {
            return Err(Error::config("arch.branch_dims", "need at least one layer"));
        }
        if self.fused_dims.is_empty() {
            return Err(Error::config("arch.fused_dims", "need at least one layer"));
        }
        let all = [self.c_radar_in, self.c_image_in, self.cls_out, self.reg_out];
        if all.iter().chain(&self.branch_dims).chain(&self.fused_dims).chain(&self.head_dims).any(|&w| w == 0) {
            return Err(Error::config("arch", "all widths must be >= 1"));
        }
        if self.reg_out != 2 {
            return Err(Error::config("arch.reg_out", "must be 2 (range, azimuth)"));
        }
        Ok(())
    }

    /// Checks that the classification width matches the codec.
    pub fn validate_against(&self, codec: &CodecConfig) -> Result<()> {
        self.validate()?;
        if self.cls_out != codec.cls_width() {
            return Err(Error::config(
                "arch.cls_out",
                format!(
                    "{} does not match codec width {} ({} range + {} azimuth, {} mode)",
                    self.cls_out,
                    codec.cls_width(),
                    codec.range_classes(),
                    codec.az_classes(),
                    codec.mode.name()
                ),
            ));
        }
        Ok(())
    }

    fn low_width(&self) -> usize {
        2 * self.branch_dims[0]
    }

    fn high_width(&self) -> usize {
        2 * self.branch_dims[self.branch_dims.len() - 1]
    }

    /// Every linear layer as `(path, fan_in, fan_out)`, in initialization order.
    pub fn layers(&self) -> Vec<(String, usize, usize)> {
        let mut out = Vec::new();
        for (name, c_in) in [("radar", self.c_radar_in), ("image", self.c_image_in)] {
            let mut prev = c_in;
            for (i, &d) in self.branch_dims.iter().enumerate() {
                out.push((format!("{name}.{i}"), prev, d));
                prev = d;
            }
        }
        let mut prev = self.low_width() + self.high_width();
        for (i, &d) in self.fused_dims.iter().enumerate() {
            out.push((format!("fused.{i}"), prev, d));
            prev = d;
        }
        let mut prev = self.low_width() + self.high_width() + self.fused_dims[self.fused_dims.len() - 1];
        for (i, &d) in self.head_dims.iter().enumerate() {
            out.push((format!("head.{i}"), prev, d));
            prev = d;
        }
        out.push(("head.cls".to_string(), prev, self.cls_out));
        out.push(("head.reg".to_string(), prev, self.reg_out));
        out
    }

    /// All parameter paths (`<layer>.weight`, `<layer>.bias`), sorted.
    pub fn param_paths(&self) -> Vec<String> {
        let mut v: Vec<String> = self
            .layers()
            .into_iter()
            .flat_map(|(l, _, _)| [format!("{l}.weight"), format!("{l}.bias")])
            .collect();
        v.sort();
        v
    }
}

/// Named network tensors keyed by layer path.
#[derive(Clone, Debug, PartialEq)]
pub struct Params<T> {
    tensors: BTreeMap<String, Tensor<T>>,
}

impl<T: Scalar> Params<T> {
    pub fn new() -> Self {
        Self { tensors: BTreeMap::new() }
    }

    pub fn insert(&mut self, path: impl Into<String>, t: Tensor<T>) {
        self.tensors.insert(path.into(), t);
    }

    pub fn get(&self, path: &str) -> Option<&Tensor<T>> {
        self.tensors.get(path)
    }

    pub fn get_mut(&mut self, path: &str) -> Option<&mut Tensor<T>> {
        self.tensors.get_mut(path)
    }

    /// Entries in path order.
    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor<T>)> {
        self.tensors.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Tensor<T>)> {
        self.tensors.iter_mut()
    }

    pub fn paths(&self) -> Vec<String> {
        self.tensors.keys().cloned().collect()
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn num_scalars(&self) -> usize {
        self.tensors.values().map(Tensor::len).sum()
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            tensors: self.tensors.iter().map(|(k, t)| (k.clone(), Tensor::zeros(t.rows(), t.cols()))).collect(),
        }
    }

    pub fn cast<U: Scalar>(&self) -> Params<U> {
        Params {
            tensors: self.tensors.iter().map(|(k, t)| (k.clone(), t.cast())).collect(),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.tensors.values().all(Tensor::is_finite)
    }

    /// Checks that paths and shapes match `arch` exactly.
    pub fn check_layout(&self, arch: &ArchConfig) -> Result<()> {
        let mut expected = BTreeMap::new();
        for (l, fi, fo) in arch.layers() {
            expected.insert(format!("{l}.weight"), (fi, fo));
            expected.insert(format!("{l}.bias"), (1, fo));
        }
        for (path, shape) in &expected {
            match self.tensors.get(path) {
                None => return Err(Error::config("params", format!("missing parameter `{path}`"))),
                Some(t) if t.shape() != *shape => {
                    return Err(Error::Dimension {
                        op: "params",
                        left: t.shape(),
                        right: *shape,
                    })
                }
                _ => {}
            }
        }
        if let Some(extra) = self.tensors.keys().find(|k| !expected.contains_key(*k)) {
            return Err(Error::config("params", format!("unexpected parameter `{extra}`")));
        }
        Ok(())
    }
}

impl<T: Scalar> Default for Params<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Glorot-uniform weights, zero biases, drawn layer by layer in
/// [`ArchConfig::layers`] order.
pub fn init_params<T: Scalar>(arch: &ArchConfig, seed: u64) -> Result<Params<T>> {
    arch.validate()?;
    let mut rng = StreamRng::new(seed, stream::INIT);
    let mut p = Params::new();
    for (layer, fan_in, fan_out) in arch.layers() {
        let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
        let data = (0..fan_in * fan_out).map(|_| T::lit(rng.uniform_range(-limit, limit))).collect();
        p.insert(format!("{layer}.weight"), Tensor::from_vec(fan_in, fan_out, data)?);
        p.insert(format!("{layer}.bias"), Tensor::zeros(1, fan_out));
    }
    Ok(p)
}

/// Node handles produced by [`forward_on_tape`].
#[derive(Debug)]
pub struct ForwardNodes {
    pub cls: NodeId,
    pub reg: NodeId,
    /// Leaf node of every parameter, by path.
    pub params: BTreeMap<String, NodeId>,
}

/// Adds every parameter to `tape` as a leaf.
pub fn param_leaves<T: Scalar>(tape: &mut Tape<T>, params: &Params<T>) -> BTreeMap<String, NodeId> {
    params.iter().map(|(path, t)| (path.clone(), tape.leaf(t.clone()))).collect()
}

/// Records the network on `tape` given parameter leaves and input nodes.
/// `groups[i]` is the group of point `i`; group ids must cover
/// `0..n_groups` without gaps. Returns `(cls, reg)` nodes.
pub fn forward_nodes<T: Scalar>(
    tape: &mut Tape<T>,
    leaves: &BTreeMap<String, NodeId>,
    arch: &ArchConfig,
    radar: NodeId,
    image: NodeId,
    groups: &[usize],
) -> Result<(NodeId, NodeId)> {
    let (n, cr) = tape.value(radar).shape();
    let (ni, ci) = tape.value(image).shape();
    if cr != arch.c_radar_in {
        return Err(Error::Dimension {
            op: "forward.radar",
            left: (n, cr),
            right: (n, arch.c_radar_in),
        });
    }
    if ci != arch.c_image_in || ni != n {
        return Err(Error::Dimension {
            op: "forward.image",
            left: (ni, ci),
            right: (n, arch.c_image_in),
        });
    }
    if groups.len() != n {
        return Err(Error::Dimension {
            op: "forward.groups",
            left: (n, 1),
            right: (groups.len(), 1),
        });
    }
    if n == 0 {
        return Err(Error::EmptyPool);
    }
    let n_groups = groups.iter().max().map_or(0, |&g| g + 1);

    let node = |path: String| -> Result<NodeId> {
        leaves
            .get(&path)
            .copied()
            .ok_or_else(|| Error::config("params", format!("missing parameter `{path}`")))
    };
    let layer = |tape: &mut Tape<T>, x: NodeId, name: &str, relu: bool| -> Result<NodeId> {
        let w = node(format!("{name}.weight"))?;
        let b = node(format!("{name}.bias"))?;
        let y = tape.linear(x, w, b)?;
        Ok(if relu { tape.relu(y) } else { y })
    };

    let image = if arch.use_image { image } else { tape.leaf(Tensor::zeros(n, arch.c_image_in)) };
    let mut branch_out = Vec::with_capacity(2);
    for (name, input) in [("radar", radar), ("image", image)] {
        let mut h = input;
        let mut outs = Vec::with_capacity(arch.branch_dims.len());
        for i in 0..arch.branch_dims.len() {
            h = layer(tape, h, &format!("{name}.{i}"), true)?;
            outs.push(h);
        }
        branch_out.push(outs);
    }
    let last = arch.branch_dims.len() - 1;
    let low = tape.concat_cols(branch_out[0][0], branch_out[1][0])?;
    let high = tape.concat_cols(branch_out[0][last], branch_out[1][last])?;
    let multi = tape.concat_cols(low, high)?;

    let mut fused = multi;
    for i in 0..arch.fused_dims.len() {
        fused = layer(tape, fused, &format!("fused.{i}"), true)?;
    }
    let pooled = tape.group_maxpool(fused, groups, n_groups)?;
    let global = tape.gather_rows(pooled, groups)?;
    let mut h = tape.concat_cols(multi, global)?;
    for i in 0..arch.head_dims.len() {
        h = layer(tape, h, &format!("head.{i}"), true)?;
    }
    let cls = layer(tape, h, "head.cls", false)?;
    let reg = layer(tape, h, "head.reg", false)?;
    Ok((cls, reg))
}

/// Records parameters, inputs and the network on `tape`.
pub fn forward_on_tape<T: Scalar>(
    tape: &mut Tape<T>,
    params: &Params<T>,
    arch: &ArchConfig,
    radar: Tensor<T>,
    image: Tensor<T>,
    groups: &[usize],
) -> Result<ForwardNodes> {
    let leaves = param_leaves(tape, params);
    let radar = tape.leaf(radar);
    let image = tape.leaf(image);
    let (cls, reg) = forward_nodes(tape, &leaves, arch, radar, image, groups)?;
    Ok(ForwardNodes {
        cls,
        reg,
        params: leaves,
    })
}

/// Inference-only forward pass: `(cls_logits N×cls_out, reg N×2)`.
pub fn forward<T: Scalar>(
    radar: &Tensor<T>,
    image: &Tensor<T>,
    groups: &[usize],
    params: &Params<T>,
    arch: &ArchConfig,
) -> Result<(Tensor<T>, Tensor<T>)> {
    let mut tape = Tape::new();
    let nodes = forward_on_tape(&mut tape, params, arch, radar.clone(), image.clone(), groups)?;
    Ok((tape.value(nodes.cls).clone(), tape.value(nodes.reg).clone()))
}

fn softmax(logits: &[f64]) -> Vec<f64> {
    let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = logits.iter().map(|&l| (l - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|x| x / s).collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct PointPrediction {
    pub range_probs: Vec<f64>,
    pub az_probs: Vec<f64>,
    /// `(Δr, Δa)` residual regression.
    pub residual: (f64, f64),
    /// Product of the two heads' top probabilities.
    pub confidence: f64,
}

impl PointPrediction {
    pub fn range_bin(&self) -> usize {
        argmax(&self.range_probs)
    }

    pub fn az_bin(&self) -> usize {
        argmax(&self.az_probs)
    }
}

fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

/// Splits raw head outputs into per-point probabilities and residuals.
pub fn interpret_outputs(cls: &Tensor<f64>, reg: &Tensor<f64>, codec: &CodecConfig) -> Vec<PointPrediction> {
    let nr = codec.range_classes();
    (0..cls.rows())
        .map(|i| {
            let row = cls.row(i);
            let range_probs = softmax(&row[..nr]);
            let az_probs = softmax(&row[nr..]);
            let pr = range_probs.iter().cloned().fold(0.0, f64::max);
            let pa = az_probs.iter().cloned().fold(0.0, f64::max);
            PointPrediction {
                range_probs,
                az_probs,
                residual: (reg.get(i, 0), reg.get(i, 1)),
                confidence: pr * pa,
            }
        })
        .collect()
}

/// Runs the network on several point groups of one frame at once. Each
/// group is a list of frame point indices; groups do not interact.
pub fn predict_groups(
    frame: &Frame,
    features: &FrameFeatures,
    groups: &[Vec<usize>],
    params: &Params<f64>,
    arch: &ArchConfig,
    codec: &CodecConfig,
) -> Result<Vec<Vec<PointPrediction>>> {
    if groups.iter().any(Vec::is_empty) {
        return Err(Error::EmptyPool);
    }
    if groups.is_empty() {
        return Ok(Vec::new());
    }
    let indices: Vec<usize> = groups.iter().flatten().copied().collect();
    let gid: Vec<usize> = groups.iter().enumerate().flat_map(|(g, v)| std::iter::repeat_n(g, v.len())).collect();
    let (radar, image) = features.point_rows(frame, &indices);
    let radar = Tensor::from_vec(indices.len(), arch.c_radar_in, radar)?;
    let image = Tensor::from_vec(indices.len(), arch.c_image_in, image)?;
    let (cls, reg) = forward(&radar, &image, &gid, params, arch)?;
    let mut flat = interpret_outputs(&cls, &reg, codec).into_iter();
    Ok(groups.iter().map(|g| flat.by_ref().take(g.len()).collect()).collect())
}

/// Per-point predictions for every candidate of `cands`.
pub fn predict_points(
    frame: &Frame,
    features: &FrameFeatures,
    cands: &CandidateSet,
    params: &Params<f64>,
    arch: &ArchConfig,
    codec: &CodecConfig,
) -> Result<Vec<PointPrediction>> {
    let mut out = predict_groups(frame, features, std::slice::from_ref(&cands.point_indices), params, arch, codec)?;
    Ok(out.pop().unwrap_or_default())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::association::associate;
    use crate::features::synth_features;
    use crate::gradcheck::{grad_check, GradCheckConfig};
    use crate::sim::{generate_frame, SimConfig};

    fn random(rows: usize, cols: usize, rng: &mut StreamRng) -> Tensor<f64> {
        Tensor::from_vec(rows, cols, (0..rows * cols).map(|_| rng.uniform_range(-2.0, 2.0)).collect()).unwrap()
    }

    #[test]
    fn default_shapes() {
        let arch = ArchConfig::default();
        let p = init_params::<f64>(&arch, 1).unwrap();
        let mut rng = StreamRng::new(2, 0);
        let (cls, reg) = forward(&random(7, 32, &mut rng), &random(7, 32, &mut rng), &[0; 7], &p, &arch).unwrap();
        assert_eq!(cls.shape(), (7, 16));
        assert_eq!(reg.shape(), (7, 2));
    }

    #[test]
    fn init_is_deterministic_with_zero_bias() {
        let arch = ArchConfig::default();
        let a = init_params::<f64>(&arch, 9).unwrap();
        assert_eq!(a, init_params::<f64>(&arch, 9).unwrap());
        assert_ne!(a, init_params::<f64>(&arch, 10).unwrap());
        for (path, t) in a.iter() {
            if path.ends_with(".bias") {
                assert!(t.data().iter().all(|&x| x == 0.0));
            }
        }
        a.check_layout(&arch).unwrap();
    }

    #[test]
    fn glorot_variance() {
        let arch = ArchConfig {
            fused_dims: vec![256],
            c_radar_in: 32,
            c_image_in: 32,
            branch_dims: vec![64],
            ..ArchConfig::default()
        };
        // fused.0 maps 256 → 256.
        let p = init_params::<f64>(&arch, 3).unwrap();
        let w = p.get("fused.0.weight").unwrap();
        assert_eq!(w.shape(), (256, 256));
        let n = w.len() as f64;
        let mean = w.data().iter().sum::<f64>() / n;
        let var = w.data().iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
        let expected = 2.0 / 512.0;
        assert!((var / expected - 1.0).abs() < 0.1, "{var} vs {expected}");
    }

    #[test]
    fn single_point_global_equals_own_feature() {
        // With one point the pooled feature is the point's own fused feature,
        // so the output does not depend on any other group.
        let arch = ArchConfig::small();
        let p = init_params::<f64>(&arch, 4).unwrap();
        let mut rng = StreamRng::new(4, 0);
        let r = random(1, 3, &mut rng);
        let i = random(1, 2, &mut rng);
        let mut tape = Tape::new();
        let nodes = forward_on_tape(&mut tape, &p, &arch, r, i, &[0]).unwrap();
        assert_eq!(tape.value(nodes.cls).shape(), (1, 5));
    }

    #[test]
    fn permutation_equivariance_and_group_isolation() {
        let arch = ArchConfig::default();
        let p = init_params::<f64>(&arch, 5).unwrap();
        let mut rng = StreamRng::new(6, 0);
        let r = random(6, 32, &mut rng);
        let i = random(6, 32, &mut rng);
        let groups = [0, 0, 1, 0, 1, 1];
        let (cls, reg) = forward(&r, &i, &groups, &p, &arch).unwrap();

        let perm = [3, 5, 0, 4, 1, 2];
        let gp: Vec<usize> = perm.iter().map(|&k| groups[k]).collect();
        let (cls_p, reg_p) = forward(&r.select_rows(&perm), &i.select_rows(&perm), &gp, &p, &arch).unwrap();
        assert_eq!(cls_p, cls.select_rows(&perm));
        assert_eq!(reg_p, reg.select_rows(&perm));

        // Changing group 1's points leaves group 0 outputs untouched.
        let mut r2 = r.clone();
        for row in [2, 4, 5] {
            for c in 0..32 {
                r2.set(row, c, rng.uniform_range(-2.0, 2.0));
            }
        }
        let (cls2, _) = forward(&r2, &i, &groups, &p, &arch).unwrap();
        for row in [0, 1, 3] {
            assert_eq!(cls2.row(row), cls.row(row));
        }
    }

    #[test]
    fn channel_mismatch_and_empty_input() {
        let arch = ArchConfig::default();
        let p = init_params::<f64>(&arch, 5).unwrap();
        let r = Tensor::zeros(2, 31);
        let i = Tensor::zeros(2, 32);
        assert!(matches!(forward(&r, &i, &[0, 0], &p, &arch), Err(Error::Dimension { .. })));
        let e = Tensor::zeros(0, 32);
        assert!(matches!(forward(&e, &e, &[], &p, &arch), Err(Error::EmptyPool)));
        // Group 0 empty.
        let r = Tensor::zeros(1, 32);
        assert!(matches!(forward(&r, &r, &[1], &p, &arch), Err(Error::EmptyPool)));
    }

    #[test]
    fn network_gradients_match_finite_differences() {
        // 3 points in 2 groups; all parameters and both inputs checked.
        let arch = ArchConfig::small();
        let p = init_params::<f64>(&arch, 11).unwrap();
        let mut rng = StreamRng::new(12, 0);
        let groups = [0usize, 1, 0];
        let mut inputs = vec![random(3, 3, &mut rng), random(3, 2, &mut rng)];
        let paths = p.paths();
        for path in &paths {
            let mut t = p.get(path).unwrap().clone();
            for x in t.data_mut() {
                *x += rng.uniform_range(-0.3, 0.3);
            }
            inputs.push(t);
        }
        let targets = [1usize, 4, 2];
        let report = grad_check(
            |tape, ids| {
                let leaves: BTreeMap<String, NodeId> = paths.iter().cloned().zip(ids[2..].iter().copied()).collect();
                let (cls, reg) = forward_nodes(tape, &leaves, &arch, ids[0], ids[1], &groups)?;
                let ce = tape.softmax_cross_entropy(cls, &targets, &[true; 3])?;
                let tgt = Tensor::from_rows(&[[0.1, -0.2], [0.3, 0.0], [-0.1, 0.2]]);
                let sl = tape.smooth_l1(reg, &tgt, &[true; 6])?;
                let sl = tape.scale(sl, 10.0);
                tape.add(ce, sl)
            },
            &inputs,
            &GradCheckConfig::default(),
        )
        .unwrap();
        assert!(report.checked > 100);
        assert!(report.max_rel_error < 1e-5, "{report:?}");
    }

    #[test]
    fn predictions_are_normalized() {
        let sim = SimConfig::default();
        let f = generate_frame(&sim, 21).unwrap();
        let feats = synth_features(&f, &sim).unwrap();
        let arch = ArchConfig::default();
        let codec = CodecConfig::default();
        let p = init_params::<f64>(&arch, 1).unwrap();
        for set in associate(&f.points, &f.gt_boxes) {
            for pp in predict_points(&f, &feats, &set, &p, &arch, &codec).unwrap() {
                assert!((pp.range_probs.iter().sum::<f64>() - 1.0).abs() < 1e-9);
                assert!((pp.az_probs.iter().sum::<f64>() - 1.0).abs() < 1e-9);
                assert!(pp.confidence > 0.0 && pp.confidence <= 1.0);
                assert_eq!(pp.range_probs.len(), 11);
                assert_eq!(pp.az_probs.len(), 5);
            }
        }
    }
}
