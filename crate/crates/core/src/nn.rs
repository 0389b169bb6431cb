//! Parameter layout, MLP encoder/decoder stacks, Adam, and checkpoints.
//!
//! All trainable state lives in one flat `f64` vector described by a
//! layout table of named segments. Gradients from the tape land in a
//! parallel flat vector, so the optimizer is a single pass over both.

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::mat::Mat;
use serde::{Deserialize, Serialize};

/// One named parameter block.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct SegmentDef {
    pub name: String,
    pub rows: usize,
    pub cols: usize,
    pub trainable: bool,
}

impl SegmentDef {
    pub fn len(&self) -> usize {
        self.rows * self.cols
    }
}

/// Layout table: covers the flat vector exactly, in declaration order.
#[derive(Debug, Clone, PartialEq)]
pub struct Layout {
    segs: Vec<SegmentDef>,
    offsets: Vec<usize>,
    total: usize,
}

impl Layout {
    pub fn new(segs: Vec<SegmentDef>) -> Layout {
        let mut offsets = Vec::with_capacity(segs.len());
        let mut total = 0;
        for s in &segs {
            offsets.push(total);
            total += s.len();
        }
        Layout { segs, offsets, total }
    }

    pub fn total(&self) -> usize {
        self.total
    }

    pub fn segments(&self) -> &[SegmentDef] {
        &self.segs
    }

    pub fn offset(&self, idx: usize) -> usize {
        self.offsets[idx]
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.segs.iter().position(|s| s.name == name)
    }

    /// View of one segment as a matrix.
    pub fn seg_mat(&self, params: &[f64], idx: usize) -> Mat {
        let s = &self.segs[idx];
        let o = self.offsets[idx];
        Mat::from_vec(s.rows, s.cols, params[o..o + s.len()].to_vec())
    }

    /// Parameter leaf on a tape for one segment.
    pub fn leaf(&self, tape: &mut Tape, params: &[f64], idx: usize) -> Var {
        tape.leaf(self.seg_mat(params, idx), self.offsets[idx])
    }

    /// Zeroes gradient entries of frozen segments.
    pub fn mask_frozen(&self, grads: &mut [f64]) {
        for (i, s) in self.segs.iter().enumerate() {
            if !s.trainable {
                let o = self.offsets[i];
                grads[o..o + s.len()].iter_mut().for_each(|g| *g = 0.0);
            }
        }
    }

    /// Name of the segment containing a flat coordinate.
    pub fn segment_of(&self, coord: usize) -> &str {
        for (i, s) in self.segs.iter().enumerate() {
            if coord >= self.offsets[i] && coord < self.offsets[i] + s.len() {
                return &s.name;
            }
        }
        "<out of range>"
    }
}

/// Feed-forward architecture: layer widths from input to output, ReLU on
/// hidden layers, linear output.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct MlpArch {
    pub sizes: Vec<usize>,
}

impl MlpArch {
    pub fn new(sizes: Vec<usize>) -> Self {
        assert!(sizes.len() >= 2, "MLP needs at least input and output sizes");
        MlpArch { sizes }
    }

    pub fn n_layers(&self) -> usize {
        self.sizes.len() - 1
    }

    /// Registers weight and bias segments ("<prefix>.w<i>", "<prefix>.b<i>").
    pub fn register(&self, segs: &mut Vec<SegmentDef>, prefix: &str, trainable: bool) {
        for i in 0..self.n_layers() {
            segs.push(SegmentDef {
                name: format!("{prefix}.w{i}"),
                rows: self.sizes[i + 1],
                cols: self.sizes[i],
                trainable,
            });
            segs.push(SegmentDef {
                name: format!("{prefix}.b{i}"),
                rows: self.sizes[i + 1],
                cols: 1,
                trainable,
            });
        }
    }
}

/// Leaf handles for one MLP's layers on a tape.
pub struct MlpVars {
    pub weights: Vec<Var>,
    pub biases: Vec<Var>,
}

impl MlpVars {
    /// Creates leaves for the segments registered under `first_seg..`.
    pub fn from_layout(
        tape: &mut Tape,
        layout: &Layout,
        params: &[f64],
        first_seg: usize,
        n_layers: usize,
    ) -> MlpVars {
        let mut weights = Vec::with_capacity(n_layers);
        let mut biases = Vec::with_capacity(n_layers);
        for i in 0..n_layers {
            weights.push(layout.leaf(tape, params, first_seg + 2 * i));
            biases.push(layout.leaf(tape, params, first_seg + 2 * i + 1));
        }
        MlpVars { weights, biases }
    }
}

/// Affine + ReLU stack recorded on the tape; linear final layer.
pub fn mlp_forward(tape: &mut Tape, vars: &MlpVars, x: Var) -> Var {
    let n = vars.weights.len();
    let mut h = x;
    for i in 0..n {
        let wx = tape.matmul(vars.weights[i], h);
        h = tape.add(wx, vars.biases[i]);
        if i + 1 < n {
            h = tape.relu(h);
        }
    }
    h
}

/// Plain (gradient-free) forward pass over the same segments.
pub fn mlp_forward_plain(
    layout: &Layout,
    params: &[f64],
    first_seg: usize,
    n_layers: usize,
    x: &Mat,
) -> Mat {
    let mut h = x.clone();
    for i in 0..n_layers {
        let w = layout.seg_mat(params, first_seg + 2 * i);
        let b = layout.seg_mat(params, first_seg + 2 * i + 1);
        h = w.matmul(&h).add(&b);
        if i + 1 < n_layers {
            for v in h.data_mut() {
                *v = v.max(0.0);
            }
        }
    }
    h
}

/// Adam optimizer state.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct AdamState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub step: u64,
}

impl AdamState {
    pub fn new(n: usize) -> Self {
        AdamState {
            m: vec![0.0; n],
            v: vec![0.0; n],
            step: 0,
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub clip_norm: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            clip_norm: 100.0,
        }
    }
}

/// Clips the global gradient norm, then applies one Adam update in place.
/// Frozen segments receive no update; NaN gradients abort with the name of
/// the offending segment.
pub fn adam_step(
    params: &mut [f64],
    grads: &mut [f64],
    state: &mut AdamState,
    cfg: &AdamConfig,
    layout: &Layout,
) -> Result<()> {
    assert_eq!(params.len(), grads.len());
    assert_eq!(params.len(), state.m.len());
    if let Some(bad) = grads.iter().position(|g| g.is_nan()) {
        return Err(Error::Numerical(format!(
            "NaN gradient in segment '{}'",
            layout.segment_of(bad)
        )));
    }
    layout.mask_frozen(grads);
    let norm: f64 = grads.iter().map(|g| g * g).sum::<f64>().sqrt();
    if norm > cfg.clip_norm {
        let s = cfg.clip_norm / norm;
        grads.iter_mut().for_each(|g| *g *= s);
    }
    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - cfg.beta1.powi(t);
    let bc2 = 1.0 - cfg.beta2.powi(t);
    for i in 0..params.len() {
        state.m[i] = cfg.beta1 * state.m[i] + (1.0 - cfg.beta1) * grads[i];
        state.v[i] = cfg.beta2 * state.v[i] + (1.0 - cfg.beta2) * grads[i] * grads[i];
        let m_hat = state.m[i] / bc1;
        let v_hat = state.v[i] / bc2;
        params[i] -= cfg.lr * m_hat / (v_hat.sqrt() + cfg.eps);
    }
    Ok(())
}

/// Versioned checkpoint container. JSON with shortest-round-trip floats,
/// so save/load is bit-exact.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Checkpoint {
    pub version: u32,
    pub segments: Vec<SegmentDef>,
    pub params: Vec<f64>,
    pub adam: AdamState,
    /// Next epoch to run when resuming.
    pub epoch: usize,
    /// Opaque model/experiment metadata echoed by the trainer.
    pub meta: serde_json::Value,
}

pub const CHECKPOINT_VERSION: u32 = 1;

impl Checkpoint {
    pub fn save(&self, path: &std::path::Path) -> Result<()> {
        let json = serde_json::to_string(self)
            .map_err(|e| Error::Parse(format!("checkpoint encode: {e}")))?;
        std::fs::write(path, json)?;
        Ok(())
    }

    pub fn load(path: &std::path::Path) -> Result<Checkpoint> {
        let raw = std::fs::read_to_string(path)?;
        let ck: Checkpoint = serde_json::from_str(&raw)
            .map_err(|e| Error::Parse(format!("checkpoint decode: {e}")))?;
        if ck.version != CHECKPOINT_VERSION {
            return Err(Error::InvalidArgument(format!(
                "unsupported checkpoint version {} (expected {})",
                ck.version, CHECKPOINT_VERSION
            )));
        }
        Ok(ck)
    }

    /// Verifies the stored layout against an expected one.
    pub fn check_layout(&self, layout: &Layout) -> Result<()> {
        if self.segments != layout.segments() {
            return Err(Error::InvalidArgument(
                "checkpoint layout does not match the configured model".into(),
            ));
        }
        if self.params.len() != layout.total() {
            return Err(Error::InvalidArgument(
                "checkpoint parameter count mismatch".into(),
            ));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::rngs::StdRng;
    use rand::{Rng, SeedableRng};

    fn tiny_layout() -> Layout {
        let mut segs = Vec::new();
        MlpArch::new(vec![3, 4, 2]).register(&mut segs, "net", true);
        Layout::new(segs)
    }

    #[test]
    fn layout_covers_vector_exactly() {
        let layout = tiny_layout();
        // 4x3 + 4 + 2x4 + 2 = 26.
        assert_eq!(layout.total(), 26);
        assert_eq!(layout.offset(0), 0);
        assert_eq!(layout.offset(1), 12);
        assert_eq!(layout.index_of("net.w1"), Some(2));
        assert_eq!(layout.segment_of(13), "net.b0");
    }

    #[test]
    fn zero_net_maps_to_zero() {
        let layout = tiny_layout();
        let params = vec![0.0; layout.total()];
        let y = mlp_forward_plain(&layout, &params, 0, 2, &Mat::col(vec![1.0, -2.0, 3.0]));
        assert_eq!(y.data(), &[0.0, 0.0]);
    }

    #[test]
    fn identity_initialized_layer_passes_input_through() {
        let mut segs = Vec::new();
        MlpArch::new(vec![3, 3]).register(&mut segs, "id", true);
        let layout = Layout::new(segs);
        let mut params = vec![0.0; layout.total()];
        // w0 = I.
        for i in 0..3 {
            params[i * 3 + i] = 1.0;
        }
        let x = Mat::col(vec![0.3, -1.2, 2.0]);
        let y = mlp_forward_plain(&layout, &params, 0, 1, &x);
        assert_eq!(y.data(), x.data());
    }

    #[test]
    fn tape_forward_matches_straight_line_reimplementation() {
        let mut rng = StdRng::seed_from_u64(61);
        let layout = tiny_layout();
        let params: Vec<f64> = (0..layout.total()).map(|_| rng.random::<f64>() - 0.5).collect();
        let x = vec![0.4, -0.9, 1.3];

        // Straight-line reference with explicit loops.
        let w0 = &params[0..12];
        let b0 = &params[12..16];
        let w1 = &params[16..24];
        let b1 = &params[24..26];
        let mut h = [0.0; 4];
        for i in 0..4 {
            let mut s = b0[i];
            for j in 0..3 {
                s += w0[i * 3 + j] * x[j];
            }
            h[i] = s.max(0.0);
        }
        let mut y = [0.0; 2];
        for i in 0..2 {
            let mut s = b1[i];
            for j in 0..4 {
                s += w1[i * 4 + j] * h[j];
            }
            y[i] = s;
        }

        let mut tape = Tape::new();
        let vars = MlpVars::from_layout(&mut tape, &layout, &params, 0, 2);
        let xin = tape.constant(Mat::col(x.clone()));
        let out = mlp_forward(&mut tape, &vars, xin);
        for i in 0..2 {
            assert!((tape.value(out).get(i, 0) - y[i]).abs() < 1e-12);
        }
        let plain = mlp_forward_plain(&layout, &params, 0, 2, &Mat::col(x));
        assert_eq!(plain.data(), tape.value(out).data());
    }

    #[test]
    fn adam_zero_grads_leave_params_unchanged() {
        let layout = tiny_layout();
        let mut params: Vec<f64> = (0..layout.total()).map(|i| i as f64 * 0.1).collect();
        let before = params.clone();
        let mut grads = vec![0.0; layout.total()];
        let mut state = AdamState::new(layout.total());
        adam_step(&mut params, &mut grads, &mut state, &AdamConfig::default(), &layout).unwrap();
        assert_eq!(params, before);
    }

    #[test]
    fn adam_clips_global_norm_at_100() {
        let mut segs = Vec::new();
        segs.push(SegmentDef {
            name: "p".into(),
            rows: 2,
            cols: 1,
            trainable: true,
        });
        let layout = Layout::new(segs);
        let mut params = vec![0.0, 0.0];
        // Norm 200 gradient must be scaled to 100 before entering moments.
        let mut grads = vec![200.0, 0.0];
        let mut state = AdamState::new(2);
        adam_step(&mut params, &mut grads, &mut state, &AdamConfig::default(), &layout).unwrap();
        assert!((grads[0] - 100.0).abs() < 1e-12);
        assert!((state.m[0] - 0.1 * 100.0).abs() < 1e-12);
    }

    #[test]
    fn adam_converges_on_quadratic() {
        // Minimize (p - 3)^2 with lr 1e-2.
        let layout = Layout::new(vec![SegmentDef {
            name: "p".into(),
            rows: 1,
            cols: 1,
            trainable: true,
        }]);
        let mut params = vec![-4.0];
        let mut state = AdamState::new(1);
        let cfg = AdamConfig {
            lr: 1e-2,
            ..Default::default()
        };
        for _ in 0..5000 {
            let mut grads = vec![2.0 * (params[0] - 3.0)];
            adam_step(&mut params, &mut grads, &mut state, &cfg, &layout).unwrap();
        }
        assert!((params[0] - 3.0).abs() < 1e-6, "got {}", params[0]);
    }

    #[test]
    fn adam_rejects_nan_with_segment_name() {
        let layout = tiny_layout();
        let mut params = vec![0.0; layout.total()];
        let mut grads = vec![0.0; layout.total()];
        grads[14] = f64::NAN;
        let mut state = AdamState::new(layout.total());
        let err =
            adam_step(&mut params, &mut grads, &mut state, &AdamConfig::default(), &layout)
                .unwrap_err();
        match err {
            Error::Numerical(msg) => assert!(msg.contains("net.b0"), "{msg}"),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn frozen_segments_do_not_move() {
        let mut segs = Vec::new();
        segs.push(SegmentDef {
            name: "frozen".into(),
            rows: 1,
            cols: 1,
            trainable: false,
        });
        segs.push(SegmentDef {
            name: "free".into(),
            rows: 1,
            cols: 1,
            trainable: true,
        });
        let layout = Layout::new(segs);
        let mut params = vec![1.0, 1.0];
        let mut grads = vec![5.0, 5.0];
        let mut state = AdamState::new(2);
        adam_step(&mut params, &mut grads, &mut state, &AdamConfig::default(), &layout).unwrap();
        assert_eq!(params[0], 1.0);
        assert!(params[1] < 1.0);
    }

    #[test]
    fn checkpoint_roundtrip_is_bit_exact() {
        let mut rng = StdRng::seed_from_u64(62);
        let layout = tiny_layout();
        let params: Vec<f64> = (0..layout.total())
            .map(|_| (rng.random::<f64>() - 0.5) * 1e3)
            .collect();
        let mut adam = AdamState::new(layout.total());
        adam.m[3] = 1.0 / 3.0;
        adam.v[5] = 2.0_f64.sqrt() * 1e-7;
        adam.step = 17;
        let ck = Checkpoint {
            version: CHECKPOINT_VERSION,
            segments: layout.segments().to_vec(),
            params: params.clone(),
            adam: adam.clone(),
            epoch: 9,
            meta: serde_json::json!({"note": "test"}),
        };
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ck.json");
        ck.save(&path).unwrap();
        let back = Checkpoint::load(&path).unwrap();
        assert_eq!(back.params, params);
        assert_eq!(back.adam, adam);
        assert_eq!(back.epoch, 9);
        back.check_layout(&layout).unwrap();

        // Saving the loaded checkpoint again reproduces identical bytes.
        let path2 = dir.path().join("ck2.json");
        back.save(&path2).unwrap();
        assert_eq!(std::fs::read(&path).unwrap(), std::fs::read(&path2).unwrap());
    }
}
