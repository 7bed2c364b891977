//! The EdgeFormer network: per-branch embedding and transformer encoder over a
//! point's K neighbors, flatten-and-concatenate fusion, and an MLP classifier.

use std::collections::HashMap;
use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{
    encoder_layer, AttentionVars, BatchStats, EncoderLayerVars, Mode, Real, Tape, Tensor, Var,
    BATCH_NORM_MOMENTUM,
};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default)]
pub enum Ablation {
    #[default]
    Full,
    /// Embedding only; no encoder stack and no final LayerNorm.
    MlpOnly,
    /// Decoder reduced to a single linear layer plus output BatchNorm.
    EncoderOnly,
    DropD1,
    DropD2,
}

impl Ablation {
    pub const ALL: [Ablation; 5] = [
        Ablation::Full,
        Ablation::MlpOnly,
        Ablation::EncoderOnly,
        Ablation::DropD1,
        Ablation::DropD2,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Ablation::Full => "full",
            Ablation::MlpOnly => "mlp_only",
            Ablation::EncoderOnly => "encoder_only",
            Ablation::DropD1 => "drop_d1",
            Ablation::DropD2 => "drop_d2",
        }
    }

    fn code(self) -> u8 {
        Ablation::ALL.iter().position(|&a| a == self).expect("listed") as u8
    }

    fn from_code(c: u8) -> Result<Self> {
        Ablation::ALL
            .get(c as usize)
            .copied()
            .ok_or_else(|| Error::Format(format!("unknown ablation code {c}")))
    }

    pub fn uses_d1(self) -> bool {
        self != Ablation::DropD1
    }

    pub fn uses_d2(self) -> bool {
        self != Ablation::DropD2
    }
}

impl fmt::Display for Ablation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Ablation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ablation::ALL
            .iter()
            .copied()
            .find(|a| a.as_str() == s)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown ablation '{s}'")))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EdgeFormerConfig {
    pub k: usize,
    pub d_model: usize,
    pub heads: usize,
    pub encoder_layers: usize,
    pub ffn_width: usize,
    pub decoder_widths: Vec<usize>,
    pub dropout_p: f64,
    pub ablation: Ablation,
    /// Both branches run through one encoder stack.
    pub share_encoder: bool,
    /// Constant multiplier applied to descriptor entries before embedding.
    pub input_scale: f64,
}

impl Default for EdgeFormerConfig {
    fn default() -> Self {
        EdgeFormerConfig {
            k: 20,
            d_model: 128,
            heads: 8,
            encoder_layers: 4,
            ffn_width: 512,
            decoder_widths: vec![512, 128],
            dropout_p: 0.5,
            ablation: Ablation::Full,
            share_encoder: false,
            input_scale: 1.0,
        }
    }
}

impl EdgeFormerConfig {
    /// Small network that trains in minutes on a CPU.
    pub fn desk() -> Self {
        EdgeFormerConfig {
            d_model: 16,
            heads: 2,
            encoder_layers: 1,
            ffn_width: 32,
            decoder_widths: vec![64, 32],
            input_scale: 50.0,
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidArgument(m));
        if self.k == 0 || self.d_model == 0 || self.ffn_width == 0 {
            return bad("k, d_model and ffn_width must be positive".into());
        }
        if self.heads == 0 || !self.d_model.is_multiple_of(self.heads) {
            return bad(format!(
                "d_model {} is not divisible by {} heads",
                self.d_model, self.heads
            ));
        }
        if self.decoder_widths.is_empty() || self.decoder_widths.contains(&0) {
            return bad("decoder widths must be nonempty and positive".into());
        }
        if !(0.0..1.0).contains(&self.dropout_p) {
            return bad(format!("dropout {} not in [0, 1)", self.dropout_p));
        }
        if !(self.input_scale > 0.0 && self.input_scale.is_finite()) {
            return bad(format!("input scale {} must be positive", self.input_scale));
        }
        Ok(())
    }

    pub fn branch_count(&self) -> usize {
        usize::from(self.ablation.uses_d1()) + usize::from(self.ablation.uses_d2())
    }

    pub fn fuse_width(&self) -> usize {
        self.branch_count() * self.k * self.d_model
    }

    fn uses_encoder(&self) -> bool {
        self.ablation != Ablation::MlpOnly
    }

    fn branches(&self) -> Vec<usize> {
        let mut b = Vec::new();
        if self.ablation.uses_d1() {
            b.push(1);
        }
        if self.ablation.uses_d2() {
            b.push(2);
        }
        b
    }

    fn encoder_prefix(&self, branch: usize) -> String {
        if self.share_encoder {
            "enc".to_string()
        } else {
            format!("b{branch}.enc")
        }
    }

    /// BatchNorm layer names in forward order.
    pub fn batch_norm_names(&self) -> Vec<String> {
        let mut names = Vec::new();
        if self.ablation != Ablation::EncoderOnly {
            for i in 0..self.decoder_widths.len() {
                names.push(format!("dec.bn{i}"));
            }
        }
        names.push("dec.bn_out".to_string());
        names
    }

    /// Trainable parameter names, shapes and fan-in, in a fixed order.
    pub fn parameter_layout(&self) -> Vec<(String, Vec<usize>, ParamInit)> {
        let d = self.d_model;
        let mut out: Vec<(String, Vec<usize>, ParamInit)> = Vec::new();
        let linear = |out: &mut Vec<_>, name: String, fan_in: usize, fan_out: usize| {
            out.push((format!("{name}.w"), vec![fan_in, fan_out], ParamInit::Uniform(fan_in)));
            out.push((format!("{name}.b"), vec![fan_out], ParamInit::Zeros));
        };
        let norm = |out: &mut Vec<_>, name: String, width: usize| {
            out.push((format!("{name}.g"), vec![width], ParamInit::Ones));
            out.push((format!("{name}.b"), vec![width], ParamInit::Zeros));
        };
        let mut encoders_done = false;
        for b in self.branches() {
            linear(&mut out, format!("b{b}.embed"), 1, d);
            if self.uses_encoder() {
                if !(self.share_encoder && encoders_done) {
                    let prefix = self.encoder_prefix(b);
                    for l in 0..self.encoder_layers {
                        for proj in ["q", "k", "v", "o"] {
                            linear(&mut out, format!("{prefix}{l}.attn.{proj}"), d, d);
                        }
                        norm(&mut out, format!("{prefix}{l}.ln1"), d);
                        linear(&mut out, format!("{prefix}{l}.ff1"), d, self.ffn_width);
                        linear(&mut out, format!("{prefix}{l}.ff2"), self.ffn_width, d);
                        norm(&mut out, format!("{prefix}{l}.ln2"), d);
                    }
                    encoders_done = true;
                }
                norm(&mut out, format!("b{b}.norm"), d);
            }
        }
        let mut prev = self.fuse_width();
        if self.ablation != Ablation::EncoderOnly {
            for (i, &w) in self.decoder_widths.iter().enumerate() {
                linear(&mut out, format!("dec.fc{i}"), prev, w);
                norm(&mut out, format!("dec.bn{i}"), w);
                prev = w;
            }
        }
        linear(&mut out, "dec.out".to_string(), prev, 2);
        norm(&mut out, "dec.bn_out".to_string(), 2);
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamInit {
    /// Uniform in `±1/sqrt(fan_in)`.
    Uniform(usize),
    Zeros,
    Ones,
}

/// Running statistics of one BatchNorm layer.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchNormState {
    pub name: String,
    pub running_mean: Vec<f32>,
    pub running_var: Vec<f32>,
}

impl BatchNormState {
    fn fresh(name: String, width: usize) -> Self {
        BatchNormState {
            name,
            running_mean: vec![0.0; width],
            running_var: vec![1.0; width],
        }
    }

    /// `running = (1 - m) * running + m * batch`, with the unbiased batch variance.
    pub fn update<T: Real>(&mut self, stats: &BatchStats<T>) {
        let m = BATCH_NORM_MOMENTUM;
        for (r, b) in self.running_mean.iter_mut().zip(&stats.mean) {
            *r = ((1.0 - m) * *r as f64 + m * b.as_f64()) as f32;
        }
        for (r, b) in self.running_var.iter_mut().zip(&stats.var_unbiased) {
            *r = ((1.0 - m) * *r as f64 + m * b.as_f64()) as f32;
        }
    }
}

/// Network weights plus BatchNorm running statistics.
#[derive(Debug, Clone, PartialEq)]
pub struct EdgeFormerParams {
    pub config: EdgeFormerConfig,
    pub seed: u64,
    pub names: Vec<String>,
    pub tensors: Vec<Tensor<f32>>,
    pub batch_norms: Vec<BatchNormState>,
}

pub fn init_params(config: &EdgeFormerConfig, seed: u64) -> Result<EdgeFormerParams> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut names = Vec::new();
    let mut tensors = Vec::new();
    for (name, shape, init) in config.parameter_layout() {
        let n: usize = shape.iter().product();
        let data: Vec<f32> = match init {
            ParamInit::Zeros => vec![0.0; n],
            ParamInit::Ones => vec![1.0; n],
            ParamInit::Uniform(fan_in) => {
                let bound = 1.0 / (fan_in as f64).sqrt();
                (0..n)
                    .map(|_| rng.random_range(-bound..bound) as f32)
                    .collect()
            }
        };
        names.push(name);
        tensors.push(Tensor::new(shape, data)?);
    }
    let batch_norms = config
        .batch_norm_names()
        .into_iter()
        .map(|name| {
            let width = if name == "dec.bn_out" {
                2
            } else {
                let i: usize = name["dec.bn".len()..].parse().expect("numbered layer");
                config.decoder_widths[i]
            };
            BatchNormState::fresh(name, width)
        })
        .collect();
    Ok(EdgeFormerParams {
        config: config.clone(),
        seed,
        names,
        tensors,
        batch_norms,
    })
}

/// Result of building the network on a tape.
#[derive(Debug)]
pub struct ForwardOutput<T> {
    pub logits: Var,
    /// One variable per trainable tensor, in parameter order.
    pub params: Vec<Var>,
    /// Train-mode batch statistics, keyed by BatchNorm index.
    pub batch_stats: Vec<BatchStats<T>>,
}

struct Lookup<'a> {
    index: HashMap<&'a str, usize>,
    vars: &'a [Var],
}

impl Lookup<'_> {
    fn get(&self, name: &str) -> Var {
        self.vars[*self
            .index
            .get(name)
            .unwrap_or_else(|| panic!("missing parameter {name}"))]
    }

    fn encoder(&self, prefix: &str) -> EncoderLayerVars {
        let p = |s: &str| self.get(&format!("{prefix}.{s}"));
        EncoderLayerVars {
            attn: AttentionVars {
                wq: p("attn.q.w"),
                bq: p("attn.q.b"),
                wk: p("attn.k.w"),
                bk: p("attn.k.b"),
                wv: p("attn.v.w"),
                bv: p("attn.v.b"),
                wo: p("attn.o.w"),
                bo: p("attn.o.b"),
            },
            ln1_gamma: p("ln1.g"),
            ln1_beta: p("ln1.b"),
            ff1_w: p("ff1.w"),
            ff1_b: p("ff1.b"),
            ff2_w: p("ff2.w"),
            ff2_b: p("ff2.b"),
            ln2_gamma: p("ln2.g"),
            ln2_beta: p("ln2.b"),
        }
    }
}

/// Lays a `[B, K]` descriptor batch out sequence-first as `[K, B, 1]`, scaled.
fn sequence_first<T: Real>(rows: &[T], b: usize, k: usize, scale: f64) -> Result<Tensor<T>> {
    let s = T::of(scale);
    let mut data = Vec::with_capacity(b * k);
    for j in 0..k {
        for i in 0..b {
            data.push(rows[i * k + j] * s);
        }
    }
    Tensor::new(vec![k, b, 1], data)
}

/// Embedding `[K, B, d]` for one branch.
pub fn embed<T: Real>(
    tape: &mut Tape<T>,
    config: &EdgeFormerConfig,
    params: &[Var],
    names: &[String],
    rows: &[T],
    branch: usize,
) -> Result<Var> {
    let lookup = make_lookup(names, params);
    embed_with(tape, config, &lookup, rows, branch)
}

fn make_lookup<'a>(names: &'a [String], vars: &'a [Var]) -> Lookup<'a> {
    Lookup {
        index: names.iter().enumerate().map(|(i, n)| (n.as_str(), i)).collect(),
        vars,
    }
}

fn embed_with<T: Real>(
    tape: &mut Tape<T>,
    config: &EdgeFormerConfig,
    lookup: &Lookup<'_>,
    rows: &[T],
    branch: usize,
) -> Result<Var> {
    let k = config.k;
    if rows.is_empty() || !rows.len().is_multiple_of(k) {
        return Err(Error::ShapeMismatch(format!(
            "descriptor batch of {} values is not a multiple of K={k}",
            rows.len()
        )));
    }
    let b = rows.len() / k;
    let x = tape.constant(sequence_first(rows, b, k, config.input_scale)?);
    let e = tape.linear(
        x,
        lookup.get(&format!("b{branch}.embed.w")),
        Some(lookup.get(&format!("b{branch}.embed.b"))),
    )?;
    Ok(tape.relu(e))
}

/// Encoder stack over K, swap to point-major `[B, K, d]`, final LayerNorm.
fn enhance_with<T: Real>(
    tape: &mut Tape<T>,
    config: &EdgeFormerConfig,
    lookup: &Lookup<'_>,
    emb: Var,
    branch: usize,
) -> Result<Var> {
    if !config.uses_encoder() {
        return tape.permute(emb, &[1, 0, 2]);
    }
    let prefix = config.encoder_prefix(branch);
    let mut x = emb;
    for l in 0..config.encoder_layers {
        let vars = lookup.encoder(&format!("{prefix}{l}"));
        x = encoder_layer(tape, x, &vars, config.heads)?;
    }
    let x = tape.permute(x, &[1, 0, 2])?;
    tape.layer_norm(
        x,
        lookup.get(&format!("b{branch}.norm.g")),
        lookup.get(&format!("b{branch}.norm.b")),
    )
}

/// Builds the whole network on `tape`. `d1` and `d2` are `[B, K]` row-major; a
/// branch removed by the ablation ignores its input entirely.
#[allow(clippy::too_many_arguments)]
pub fn forward<T: Real>(
    tape: &mut Tape<T>,
    params: &EdgeFormerParams,
    tensors: &[Tensor<T>],
    d1: &[T],
    d2: &[T],
    mode: Mode,
    rng: &mut dyn RngCore,
) -> Result<ForwardOutput<T>> {
    let vars: Vec<Var> = tensors.iter().map(|t| tape.param(t.clone())).collect();
    forward_with_vars(tape, params, vars, d1, d2, mode, rng)
}

/// Like [`forward`], with parameters already placed on the tape in parameter order.
pub fn forward_with_vars<T: Real>(
    tape: &mut Tape<T>,
    params: &EdgeFormerParams,
    vars: Vec<Var>,
    d1: &[T],
    d2: &[T],
    mode: Mode,
    rng: &mut dyn RngCore,
) -> Result<ForwardOutput<T>> {
    let config = &params.config;
    if vars.len() != params.names.len() {
        return Err(Error::ShapeMismatch(format!(
            "{} parameter variables for {} parameters",
            vars.len(),
            params.names.len()
        )));
    }
    let lookup = make_lookup(&params.names, &vars);
    let k = config.k;
    let mut fused_parts = Vec::new();
    let mut batch = None;
    for (branch, rows) in [(1, d1), (2, d2)] {
        let used = if branch == 1 {
            config.ablation.uses_d1()
        } else {
            config.ablation.uses_d2()
        };
        if !used {
            continue;
        }
        let b = rows.len() / k;
        if *batch.get_or_insert(b) != b {
            return Err(Error::ShapeMismatch("D1 and D2 batch sizes differ".into()));
        }
        let emb = embed_with(tape, config, &lookup, rows, branch)?;
        let enh = enhance_with(tape, config, &lookup, emb, branch)?;
        fused_parts.push(tape.reshape(enh, &[b, k * config.d_model])?);
    }
    let fused = tape.concat_last(&fused_parts)?;
    let mut bn_index = 0;
    let mut batch_stats = Vec::new();
    let mut norm = |tape: &mut Tape<T>, x: Var, name: &str| -> Result<Var> {
        let (g, b) = (lookup.get(&format!("{name}.g")), lookup.get(&format!("{name}.b")));
        let out = match mode {
            Mode::Train => {
                let (y, stats) = tape.batch_norm_train(x, g, b)?;
                batch_stats.push(stats);
                y
            }
            Mode::Eval => {
                let st = &params.batch_norms[bn_index];
                let mean: Vec<T> = st.running_mean.iter().map(|&v| T::of(v as f64)).collect();
                let var: Vec<T> = st.running_var.iter().map(|&v| T::of(v as f64)).collect();
                tape.batch_norm_eval(x, g, b, &mean, &var)?
            }
        };
        bn_index += 1;
        Ok(out)
    };
    let mut h = fused;
    if config.ablation != Ablation::EncoderOnly {
        for i in 0..config.decoder_widths.len() {
            let name = format!("dec.fc{i}");
            h = tape.linear(
                h,
                lookup.get(&format!("{name}.w")),
                Some(lookup.get(&format!("{name}.b"))),
            )?;
            h = tape.relu(h);
            h = norm(tape, h, &format!("dec.bn{i}"))?;
            if i == 0 {
                h = tape.dropout(h, config.dropout_p, mode, rng)?;
            }
        }
    }
    let out = tape.linear(h, lookup.get("dec.out.w"), Some(lookup.get("dec.out.b")))?;
    let logits = norm(tape, out, "dec.bn_out")?;
    Ok(ForwardOutput {
        logits,
        params: vars,
        batch_stats,
    })
}

impl EdgeFormerParams {
    pub fn config(&self) -> &EdgeFormerConfig {
        &self.config
    }

    pub fn parameter_count(&self) -> usize {
        self.tensors.iter().map(|t| t.numel()).sum()
    }

    pub fn tensor(&self, name: &str) -> Option<&Tensor<f32>> {
        self.names
            .iter()
            .position(|n| n == name)
            .map(|i| &self.tensors[i])
    }

    pub fn all_finite(&self) -> bool {
        self.tensors.iter().all(|t| t.all_finite())
    }

    /// Eval-mode logits `[B, 2]` for a batch of descriptor rows.
    pub fn logits(&self, d1: &[f32], d2: &[f32]) -> Result<Vec<f32>> {
        let mut tape = Tape::<f32>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let out = forward(&mut tape, self, &self.tensors, d1, d2, Mode::Eval, &mut rng)?;
        Ok(tape.value(out.logits).data().to_vec())
    }

    /// Eval-mode probability of the edge class for each row.
    pub fn edge_probabilities(&self, d1: &[f32], d2: &[f32]) -> Result<Vec<f64>> {
        let logits = self.logits(d1, d2)?;
        Ok(logits
            .chunks(2)
            .map(|l| {
                let (a, b) = (l[0] as f64, l[1] as f64);
                let m = a.max(b);
                let (ea, eb) = ((a - m).exp(), (b - m).exp());
                eb / (ea + eb)
            })
            .collect())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }

    /// `EFCK`, version, config block, then named tensors (weights first, then
    /// BatchNorm running statistics), all little-endian.
    pub fn to_bytes(&self) -> Vec<u8> {
        let c = &self.config;
        let mut w = Writer::default();
        w.bytes(CHECKPOINT_MAGIC);
        w.u32(CHECKPOINT_VERSION);
        for v in [c.k, c.d_model, c.heads, c.encoder_layers, c.ffn_width, c.decoder_widths.len()] {
            w.u32(v as u32);
        }
        for &v in &c.decoder_widths {
            w.u32(v as u32);
        }
        w.f64(c.dropout_p);
        w.bytes(&[c.ablation.code(), u8::from(c.share_encoder)]);
        w.f64(c.input_scale);
        w.u64(self.seed);
        let count = self.tensors.len() + 2 * self.batch_norms.len();
        w.u32(count as u32);
        for (name, t) in self.names.iter().zip(&self.tensors) {
            w.tensor(name, t.shape(), t.data());
        }
        for bn in &self.batch_norms {
            let n = bn.running_mean.len();
            w.tensor(&format!("{}.running_mean", bn.name), &[n], &bn.running_mean);
            w.tensor(&format!("{}.running_var", bn.name), &[n], &bn.running_var);
        }
        w.0
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4)? != CHECKPOINT_MAGIC {
            return Err(Error::Format("missing EFCK magic".into()));
        }
        let version = r.u32()?;
        if version != CHECKPOINT_VERSION {
            return Err(Error::Format(format!("unsupported checkpoint version {version}")));
        }
        let mut h = [0usize; 6];
        for v in h.iter_mut() {
            *v = r.u32()? as usize;
        }
        let decoder_widths = (0..h[5]).map(|_| r.u32().map(|v| v as usize)).collect::<Result<_>>()?;
        let dropout_p = r.f64()?;
        let flags = r.take(2)?;
        let (ablation, share_encoder) = (Ablation::from_code(flags[0])?, flags[1] != 0);
        let input_scale = r.f64()?;
        let seed = r.u64()?;
        let config = EdgeFormerConfig {
            k: h[0],
            d_model: h[1],
            heads: h[2],
            encoder_layers: h[3],
            ffn_width: h[4],
            decoder_widths,
            dropout_p,
            ablation,
            share_encoder,
            input_scale,
        };
        config.validate()?;
        let mut params = init_params(&config, seed)?;
        let count = r.u32()? as usize;
        let mut found: HashMap<String, Tensor<f32>> = HashMap::new();
        for _ in 0..count {
            let (name, t) = r.tensor()?;
            found.insert(name, t);
        }
        for (name, slot) in params.names.iter().zip(params.tensors.iter_mut()) {
            let t = found
                .remove(name)
                .ok_or_else(|| Error::Format(format!("checkpoint lacks tensor {name}")))?;
            if t.shape() != slot.shape() {
                return Err(Error::Format(format!(
                    "tensor {name} has shape {:?}, expected {:?}",
                    t.shape(),
                    slot.shape()
                )));
            }
            *slot = t;
        }
        for bn in params.batch_norms.iter_mut() {
            for (suffix, dst) in [
                ("running_mean", &mut bn.running_mean),
                ("running_var", &mut bn.running_var),
            ] {
                let key = format!("{}.{suffix}", bn.name);
                let t = found
                    .remove(&key)
                    .ok_or_else(|| Error::Format(format!("checkpoint lacks tensor {key}")))?;
                if t.numel() != dst.len() {
                    return Err(Error::Format(format!("tensor {key} has the wrong length")));
                }
                *dst = t.into_data();
            }
        }
        if let Some(extra) = found.keys().next() {
            return Err(Error::Format(format!("unexpected tensor {extra}")));
        }
        if r.pos != bytes.len() {
            return Err(Error::Format("trailing bytes after checkpoint".into()));
        }
        Ok(params)
    }
}

const CHECKPOINT_MAGIC: &[u8; 4] = b"EFCK";
const CHECKPOINT_VERSION: u32 = 1;

#[derive(Default)]
struct Writer(Vec<u8>);

impl Writer {
    fn bytes(&mut self, b: &[u8]) {
        self.0.extend_from_slice(b);
    }
    fn u32(&mut self, v: u32) {
        self.bytes(&v.to_le_bytes());
    }
    fn u64(&mut self, v: u64) {
        self.bytes(&v.to_le_bytes());
    }
    fn f64(&mut self, v: f64) {
        self.bytes(&v.to_le_bytes());
    }
    fn tensor(&mut self, name: &str, shape: &[usize], data: &[f32]) {
        self.u32(name.len() as u32);
        self.bytes(name.as_bytes());
        self.u32(shape.len() as u32);
        for &d in shape {
            self.u32(d as u32);
        }
        for v in data {
            self.bytes(&v.to_le_bytes());
        }
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::Format("checkpoint is truncated".into()));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }
    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }
    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
    fn tensor(&mut self) -> Result<(String, Tensor<f32>)> {
        let len = self.u32()? as usize;
        let name = String::from_utf8(self.take(len)?.to_vec())
            .map_err(|_| Error::Format("tensor name is not UTF-8".into()))?;
        let nd = self.u32()? as usize;
        let shape = (0..nd).map(|_| self.u32().map(|v| v as usize)).collect::<Result<Vec<_>>>()?;
        let n: usize = shape.iter().product();
        let raw = self.take(n * 4)?;
        let data = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect();
        Ok((name, Tensor::new(shape, data)?))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny(ablation: Ablation) -> EdgeFormerConfig {
        EdgeFormerConfig {
            k: 4,
            d_model: 8,
            heads: 2,
            encoder_layers: 1,
            ffn_width: 16,
            decoder_widths: vec![12, 6],
            ablation,
            ..Default::default()
        }
    }

    #[test]
    fn init_is_deterministic() {
        let a = init_params(&EdgeFormerConfig::default(), 7).unwrap();
        let b = init_params(&EdgeFormerConfig::default(), 7).unwrap();
        assert_eq!(a, b);
        assert!(a.tensor("b1.enc0.ln1.g").unwrap().data().iter().all(|&v| v == 1.0));
        assert_eq!(a.tensor("dec.fc0.w").unwrap().shape(), &[5120, 512]);
    }

    #[test]
    fn fuse_widths() {
        assert_eq!(EdgeFormerConfig::default().fuse_width(), 5120);
        assert_eq!(tiny(Ablation::DropD2).fuse_width(), 32);
    }

    #[test]
    fn checkpoint_roundtrip() {
        for ab in Ablation::ALL {
            let mut p = init_params(&tiny(ab), 3).unwrap();
            p.batch_norms[0].running_mean[0] = 0.25;
            let back = EdgeFormerParams::from_bytes(&p.to_bytes()).unwrap();
            assert_eq!(back, p);
        }
        let p = init_params(&tiny(Ablation::Full), 3).unwrap();
        let bytes = p.to_bytes();
        assert!(EdgeFormerParams::from_bytes(&bytes[..bytes.len() - 1]).is_err());
    }

    #[test]
    fn shared_encoder_has_one_stack() {
        let mut c = tiny(Ablation::Full);
        c.share_encoder = true;
        let names: Vec<_> = c.parameter_layout().into_iter().map(|p| p.0).collect();
        assert!(names.iter().any(|n| n.starts_with("enc0.")));
        assert!(!names.iter().any(|n| n.starts_with("b1.enc")));
    }

    #[test]
    fn tiny_model_gradient_matches_finite_differences() {
        use crate::autodiff::grad_check;
        for ab in Ablation::ALL {
            let params = init_params(&tiny(ab), 11).unwrap();
            // Nonzero biases and inputs keep every ReLU away from its kink.
            let mut rng = ChaCha8Rng::seed_from_u64(12);
            let inputs: Vec<Tensor<f64>> = params
                .tensors
                .iter()
                .map(|t| {
                    let mut t = t.cast::<f64>();
                    for v in t.data_mut() {
                        *v += rng.random_range(-0.2..0.2);
                    }
                    t
                })
                .collect();
            let d1: Vec<f64> = (0..12).map(|i| ((i * 5 % 7) as f64 + 0.5) * 0.3).collect();
            let d2: Vec<f64> = (0..12).map(|i| ((i * 3 % 5) as f64 + 0.5) * 0.4).collect();
            let report = grad_check(
                |tape, vars| {
                    let mut rng = ChaCha8Rng::seed_from_u64(5);
                    let out =
                        forward_with_vars(tape, &params, vars.to_vec(), &d1, &d2, Mode::Train, &mut rng)?;
                    tape.softmax_cross_entropy(out.logits, &[1, 0, 1])
                },
                &inputs,
                1e-5,
            )
            .unwrap();
            // Some true gradients are exactly zero (key biases, biases feeding a
            // train-mode BatchNorm) or tiny; below an absolute gap of 1e-9 the
            // difference quotient is dominated by rounding, so those entries pass.
            let worst = report.max_relative_error_above(1e-9);
            assert!(worst < 1e-4, "{ab}: {worst}");
        }
    }
}
