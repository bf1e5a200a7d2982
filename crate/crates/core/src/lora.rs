//! Frozen toy transformer-block classifier with LoRA adapters.
//!
//! The block is single-head self-attention followed by a gated MLP, both with
//! residual connections, then a mean-pool over positions and a linear head.
//! Each of the seven projection matrices can carry an adapter pair `(A, B)`
//! whose update `s · B · A` is added to the frozen weight. Gradients are
//! computed by hand; only the adapter factors are trained during fine-tuning.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{self, Example, TaskSpec};
use crate::derive_seed;
use crate::error::{FedError, Result};
use crate::linalg::{matmul, matmul_nt, matmul_tn, random_init, Matrix};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum InjectionTarget {
    Q,
    K,
    V,
    O,
    Gate,
    Up,
    Down,
}

impl InjectionTarget {
    pub const ALL: [InjectionTarget; 7] = [
        InjectionTarget::Q,
        InjectionTarget::K,
        InjectionTarget::V,
        InjectionTarget::O,
        InjectionTarget::Gate,
        InjectionTarget::Up,
        InjectionTarget::Down,
    ];

    pub fn name(self) -> &'static str {
        match self {
            InjectionTarget::Q => "q",
            InjectionTarget::K => "k",
            InjectionTarget::V => "v",
            InjectionTarget::O => "o",
            InjectionTarget::Gate => "gate",
            InjectionTarget::Up => "up",
            InjectionTarget::Down => "down",
        }
    }

    /// `(d_out, d_in)` of the frozen matrix this target adapts.
    pub fn shape(self, dims: &ModelDims) -> (usize, usize) {
        match self {
            InjectionTarget::Q | InjectionTarget::K | InjectionTarget::V | InjectionTarget::O => {
                (dims.d, dims.d)
            }
            InjectionTarget::Gate | InjectionTarget::Up => (dims.hidden, dims.d),
            InjectionTarget::Down => (dims.d, dims.hidden),
        }
    }
}

impl fmt::Display for InjectionTarget {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for InjectionTarget {
    type Err = FedError;

    fn from_str(s: &str) -> Result<Self> {
        InjectionTarget::ALL
            .into_iter()
            .find(|t| t.name() == s)
            .ok_or_else(|| FedError::Input(format!("unknown injection target {s:?}")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelDims {
    pub vocab: usize,
    pub d: usize,
    pub hidden: usize,
    pub classes: usize,
    pub seq_len: usize,
}

impl Default for ModelDims {
    fn default() -> Self {
        Self {
            vocab: 64,
            d: 16,
            hidden: 32,
            classes: 8,
            seq_len: 12,
        }
    }
}

impl ModelDims {
    pub fn validate(&self) -> Result<()> {
        if [self.vocab, self.d, self.hidden, self.classes, self.seq_len].contains(&0) {
            return Err(FedError::Config(format!("model dims must be positive: {self:?}")));
        }
        Ok(())
    }
}

/// How the adapter product is scaled before it is added to the frozen weight.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScalingMode {
    /// `s = alpha / rank`
    #[default]
    AlphaOverR,
    /// `s = alpha`
    Alpha,
}

impl ScalingMode {
    pub fn scale(self, alpha: f64, rank: usize) -> f64 {
        match self {
            ScalingMode::AlphaOverR => alpha / rank as f64,
            ScalingMode::Alpha => alpha,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            ScalingMode::AlphaOverR => "alpha_over_r",
            ScalingMode::Alpha => "alpha",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "alpha_over_r" => Ok(ScalingMode::AlphaOverR),
            "alpha" => Ok(ScalingMode::Alpha),
            other => Err(FedError::Input(format!("unknown scaling mode {other:?}"))),
        }
    }
}

/// Frozen weights of the toy classifier. All projections are stored
/// `d_out × d_in` and applied as `x · Wᵀ` on row-vector activations.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BaseModel {
    pub dims: ModelDims,
    pub embed: Matrix,
    pub wq: Matrix,
    pub wk: Matrix,
    pub wv: Matrix,
    pub wo: Matrix,
    pub w_gate: Matrix,
    pub w_up: Matrix,
    pub w_down: Matrix,
    pub w_head: Matrix,
}

impl BaseModel {
    /// Random untrained weights.
    pub fn init(dims: ModelDims, seed: u64) -> Self {
        let lin = |rows: usize, cols: usize, tag: u64| {
            random_init(rows, cols, 1.0 / (cols as f64).sqrt(), derive_seed(seed, tag))
        };
        Self {
            dims,
            embed: random_init(dims.vocab, dims.d, 1.0, derive_seed(seed, 0)),
            wq: lin(dims.d, dims.d, 1),
            wk: lin(dims.d, dims.d, 2),
            wv: lin(dims.d, dims.d, 3),
            wo: lin(dims.d, dims.d, 4),
            w_gate: lin(dims.hidden, dims.d, 5),
            w_up: lin(dims.hidden, dims.d, 6),
            w_down: lin(dims.d, dims.hidden, 7),
            w_head: lin(dims.classes, dims.d, 8),
        }
    }

    pub fn weight(&self, target: InjectionTarget) -> &Matrix {
        match target {
            InjectionTarget::Q => &self.wq,
            InjectionTarget::K => &self.wk,
            InjectionTarget::V => &self.wv,
            InjectionTarget::O => &self.wo,
            InjectionTarget::Gate => &self.w_gate,
            InjectionTarget::Up => &self.w_up,
            InjectionTarget::Down => &self.w_down,
        }
    }

    fn zeros_like(&self) -> Self {
        let z = |m: &Matrix| Matrix::zeros(m.rows(), m.cols());
        Self {
            dims: self.dims,
            embed: z(&self.embed),
            wq: z(&self.wq),
            wk: z(&self.wk),
            wv: z(&self.wv),
            wo: z(&self.wo),
            w_gate: z(&self.w_gate),
            w_up: z(&self.w_up),
            w_down: z(&self.w_down),
            w_head: z(&self.w_head),
        }
    }

    fn matrices(&self) -> [&Matrix; 9] {
        [
            &self.embed,
            &self.wq,
            &self.wk,
            &self.wv,
            &self.wo,
            &self.w_gate,
            &self.w_up,
            &self.w_down,
            &self.w_head,
        ]
    }

    fn matrices_mut(&mut self) -> [&mut Matrix; 9] {
        [
            &mut self.embed,
            &mut self.wq,
            &mut self.wk,
            &mut self.wv,
            &mut self.wo,
            &mut self.w_gate,
            &mut self.w_up,
            &mut self.w_down,
            &mut self.w_head,
        ]
    }

    /// Raw little-endian bytes of every weight, for equality snapshots.
    pub fn to_bytes(&self) -> Vec<u8> {
        self.matrices()
            .iter()
            .flat_map(|m| m.data().iter().flat_map(|v| v.to_le_bytes()))
            .collect()
    }
}

/// One layer's LoRA factors. The effective update is `scale() · B · A`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdapterPair {
    pub target: InjectionTarget,
    /// r × d_in
    pub a: Matrix,
    /// d_out × r
    pub b: Matrix,
    pub rank: usize,
    pub alpha: f64,
    pub scaling: ScalingMode,
}

impl AdapterPair {
    pub fn new(
        target: InjectionTarget,
        a: Matrix,
        b: Matrix,
        alpha: f64,
        scaling: ScalingMode,
    ) -> Result<Self> {
        let rank = a.rows();
        if b.cols() != rank || rank == 0 {
            return Err(FedError::Shape(format!(
                "{target}: A is {}x{}, B is {}x{}",
                a.rows(),
                a.cols(),
                b.rows(),
                b.cols()
            )));
        }
        Ok(Self {
            target,
            a,
            b,
            rank,
            alpha,
            scaling,
        })
    }

    pub fn scale(&self) -> f64 {
        self.scaling.scale(self.alpha, self.rank)
    }

    /// `(d_out, d_in)` of the update.
    pub fn shape(&self) -> (usize, usize) {
        (self.b.rows(), self.a.cols())
    }

    /// `s · B · A`.
    pub fn delta(&self) -> Matrix {
        matmul(&self.b, &self.a)
            .expect("validated adapter factors")
            .scale(self.scale())
    }
}

/// `W + s · B · A`.
pub fn adapted_matrix(base: &Matrix, pair: &AdapterPair) -> Result<Matrix> {
    if base.shape() != pair.shape() {
        return Err(FedError::Shape(format!(
            "{}: base {:?} vs adapter {:?}",
            pair.target,
            base.shape(),
            pair.shape()
        )));
    }
    base.add(&pair.delta())
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct AdapterSet {
    pub pairs: BTreeMap<InjectionTarget, AdapterPair>,
}

impl AdapterSet {
    pub fn empty() -> Self {
        Self::default()
    }

    /// Standard LoRA start: `A ~ N(0, 1/d_in)`, `B = 0`.
    pub fn init(
        dims: &ModelDims,
        targets: &[InjectionTarget],
        rank: usize,
        alpha: f64,
        scaling: ScalingMode,
        seed: u64,
    ) -> Result<Self> {
        let mut pairs = BTreeMap::new();
        for &t in targets {
            let (d_out, d_in) = t.shape(dims);
            if rank == 0 || rank > d_out.min(d_in) {
                return Err(FedError::Rank {
                    rank,
                    rows: d_out,
                    cols: d_in,
                });
            }
            let a = random_init(rank, d_in, 1.0 / (d_in as f64).sqrt(), derive_seed(seed, t as u64));
            let b = Matrix::zeros(d_out, rank);
            pairs.insert(t, AdapterPair::new(t, a, b, alpha, scaling)?);
        }
        Ok(Self { pairs })
    }

    pub fn from_pairs(pairs: impl IntoIterator<Item = AdapterPair>) -> Result<Self> {
        let set = Self {
            pairs: pairs.into_iter().map(|p| (p.target, p)).collect(),
        };
        set.validate()?;
        Ok(set)
    }

    pub fn get(&self, target: InjectionTarget) -> Option<&AdapterPair> {
        self.pairs.get(&target)
    }

    pub fn targets(&self) -> Vec<InjectionTarget> {
        self.pairs.keys().copied().collect()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    /// Rank, alpha and scaling mode shared by every pair.
    pub fn hyper(&self) -> Option<(usize, f64, ScalingMode)> {
        self.pairs.values().next().map(|p| (p.rank, p.alpha, p.scaling))
    }

    pub fn validate(&self) -> Result<()> {
        let Some((rank, alpha, scaling)) = self.hyper() else {
            return Ok(());
        };
        for (t, p) in &self.pairs {
            if *t != p.target {
                return Err(FedError::Shape(format!("pair for {} stored under {t}", p.target)));
            }
            if p.rank != rank || p.alpha != alpha || p.scaling != scaling {
                return Err(FedError::Shape(format!(
                    "{t}: rank/alpha/scaling differ within one adapter set"
                )));
            }
            if p.a.rows() != p.rank || p.b.cols() != p.rank {
                return Err(FedError::Shape(format!("{t}: factor shapes disagree with rank")));
            }
        }
        Ok(())
    }

    /// Checks every pair against the model's frozen matrices.
    pub fn check_dims(&self, dims: &ModelDims) -> Result<()> {
        self.validate()?;
        for (t, p) in &self.pairs {
            if p.shape() != t.shape(dims) {
                return Err(FedError::Shape(format!(
                    "{t}: adapter update {:?} does not fit model matrix {:?}",
                    p.shape(),
                    t.shape(dims)
                )));
            }
        }
        Ok(())
    }

    fn params_mut(&mut self) -> Vec<&mut [f64]> {
        self.pairs
            .values_mut()
            .flat_map(|p| [p.a.data_mut(), p.b.data_mut()])
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FactorGrad {
    pub a: Matrix,
    pub b: Matrix,
}

/// Gradients with the same layout as an [`AdapterSet`].
#[derive(Debug, Clone, PartialEq, Default)]
pub struct AdapterGrads {
    pub pairs: BTreeMap<InjectionTarget, FactorGrad>,
}

impl AdapterGrads {
    pub fn zeros_like(set: &AdapterSet) -> Self {
        Self {
            pairs: set
                .pairs
                .iter()
                .map(|(&t, p)| {
                    (
                        t,
                        FactorGrad {
                            a: Matrix::zeros(p.a.rows(), p.a.cols()),
                            b: Matrix::zeros(p.b.rows(), p.b.cols()),
                        },
                    )
                })
                .collect(),
        }
    }

    pub fn add_scaled(&mut self, factor: f64, other: &AdapterGrads) -> Result<()> {
        for (t, g) in &other.pairs {
            let mine = self
                .pairs
                .get_mut(t)
                .ok_or_else(|| FedError::Shape(format!("gradient for {t} missing")))?;
            mine.a.add_scaled(factor, &g.a)?;
            mine.b.add_scaled(factor, &g.b)?;
        }
        Ok(())
    }

    pub fn scale(&mut self, factor: f64) {
        for g in self.pairs.values_mut() {
            g.a = g.a.scale(factor);
            g.b = g.b.scale(factor);
        }
    }

    fn slices(&self) -> Vec<&[f64]> {
        self.pairs
            .values()
            .flat_map(|g| [g.a.data(), g.b.data()])
            .collect()
    }
}

/// Dropout on the LoRA branch output, with its own mask stream.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Dropout {
    pub rate: f64,
    pub seed: u64,
}

struct LinearTrace {
    input: Matrix,
    z: Option<Matrix>,
    mask: Option<Matrix>,
}

fn linear_forward(
    x: &Matrix,
    w: &Matrix,
    pair: Option<&AdapterPair>,
    dropout: Option<(f64, &mut ChaCha8Rng)>,
) -> Result<(Matrix, LinearTrace)> {
    let mut y = matmul_nt(x, w)?;
    let mut trace = LinearTrace {
        input: x.clone(),
        z: None,
        mask: None,
    };
    if let Some(p) = pair {
        let z = matmul_nt(x, &p.a)?;
        let branch = matmul_nt(&z, &p.b)?.scale(p.scale());
        match dropout {
            Some((rate, rng)) if rate > 0.0 => {
                let keep = 1.0 / (1.0 - rate);
                let mask_data = (0..branch.rows() * branch.cols())
                    .map(|_| if rng.random::<f64>() < rate { 0.0 } else { keep })
                    .collect();
                let mask = Matrix::new(branch.rows(), branch.cols(), mask_data)?;
                y.add_scaled(1.0, &branch.hadamard(&mask)?)?;
                trace.mask = Some(mask);
            }
            _ => y.add_scaled(1.0, &branch)?,
        }
        trace.z = Some(z);
    }
    Ok((y, trace))
}

struct LinearGrads {
    dx: Matrix,
    factors: Option<FactorGrad>,
    dw: Option<Matrix>,
}

fn linear_backward(
    dy: &Matrix,
    w: &Matrix,
    pair: Option<&AdapterPair>,
    trace: &LinearTrace,
    want_weight: bool,
) -> Result<LinearGrads> {
    let mut dx = matmul(dy, w)?;
    let dw = if want_weight {
        Some(matmul_tn(dy, &trace.input)?)
    } else {
        None
    };
    let mut factors = None;
    if let (Some(p), Some(z)) = (pair, trace.z.as_ref()) {
        let s = p.scale();
        let d_branch = match &trace.mask {
            Some(m) => dy.hadamard(m)?,
            None => dy.clone(),
        };
        let db = matmul_tn(&d_branch, z)?.scale(s);
        let dz = matmul(&d_branch, &p.b)?.scale(s);
        let da = matmul_tn(&dz, &trace.input)?;
        dx.add_scaled(1.0, &matmul(&dz, &p.a)?)?;
        factors = Some(FactorGrad { a: da, b: db });
    }
    Ok(LinearGrads { dx, factors, dw })
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

/// Activations kept from a forward pass for the backward pass.
pub struct ForwardCache {
    tokens: Vec<usize>,
    q: Matrix,
    k: Matrix,
    v: Matrix,
    probs: Matrix,
    gate: Matrix,
    up: Matrix,
    pooled: Vec<f64>,
    traces: BTreeMap<InjectionTarget, LinearTrace>,
}

pub struct ForwardOutput {
    pub logits: Vec<f64>,
    pub cache: ForwardCache,
}

fn check_tokens(dims: &ModelDims, tokens: &[usize]) -> Result<()> {
    if tokens.len() != dims.seq_len {
        return Err(FedError::Input(format!(
            "sequence has {} tokens, model expects {}",
            tokens.len(),
            dims.seq_len
        )));
    }
    if let Some(t) = tokens.iter().find(|&&t| t >= dims.vocab) {
        return Err(FedError::Input(format!("token {t} outside vocabulary of {}", dims.vocab)));
    }
    Ok(())
}

pub fn forward(
    model: &BaseModel,
    adapters: &AdapterSet,
    tokens: &[usize],
    dropout: Option<Dropout>,
) -> Result<ForwardOutput> {
    let dims = &model.dims;
    check_tokens(dims, tokens)?;
    let mut rng = dropout.map(|d| (d.rate, ChaCha8Rng::seed_from_u64(d.seed)));
    let mut traces = BTreeMap::new();
    let mut lin = |t: InjectionTarget, x: &Matrix| -> Result<Matrix> {
        let drop = rng.as_mut().map(|(rate, r)| (*rate, r));
        let (y, tr) = linear_forward(x, model.weight(t), adapters.get(t), drop)?;
        traces.insert(t, tr);
        Ok(y)
    };

    let mut x = Matrix::zeros(dims.seq_len, dims.d);
    for (i, &tok) in tokens.iter().enumerate() {
        x.row_mut(i).copy_from_slice(model.embed.row(tok));
    }

    let q = lin(InjectionTarget::Q, &x)?;
    let k = lin(InjectionTarget::K, &x)?;
    let v = lin(InjectionTarget::V, &x)?;
    let c = 1.0 / (dims.d as f64).sqrt();
    let scores = matmul_nt(&q, &k)?.scale(c);
    let mut probs = Matrix::zeros(dims.seq_len, dims.seq_len);
    for r in 0..dims.seq_len {
        probs.row_mut(r).copy_from_slice(&softmax(scores.row(r)));
    }
    let att = matmul(&probs, &v)?;
    let o = lin(InjectionTarget::O, &att)?;
    let h1 = x.add(&o)?;

    let gate = lin(InjectionTarget::Gate, &h1)?;
    let up = lin(InjectionTarget::Up, &h1)?;
    let mut act = Matrix::zeros(gate.rows(), gate.cols());
    for (i, a) in act.data_mut().iter_mut().enumerate() {
        let g = gate.data()[i];
        *a = g * sigmoid(g) * up.data()[i];
    }
    let down = lin(InjectionTarget::Down, &act)?;
    let h2 = h1.add(&down)?;

    let pooled = h2.row_mean();
    let logits: Vec<f64> = (0..dims.classes)
        .map(|c| model.w_head.row(c).iter().zip(&pooled).map(|(w, p)| w * p).sum())
        .collect();

    Ok(ForwardOutput {
        logits,
        cache: ForwardCache {
            tokens: tokens.to_vec(),
            q,
            k,
            v,
            probs,
            gate,
            up,
            pooled,
            traces,
        },
    })
}

/// Backward pass from `d loss / d logits`. Base-weight gradients are only
/// produced when `want_base` is set (pretraining).
fn backward(
    model: &BaseModel,
    adapters: &AdapterSet,
    cache: &ForwardCache,
    dlogits: &[f64],
    want_base: bool,
) -> Result<(AdapterGrads, Option<BaseModel>)> {
    let dims = &model.dims;
    let l = dims.seq_len;
    let mut agrads = AdapterGrads::default();
    let mut bgrads = want_base.then(|| model.zeros_like());

    let lin_back = |t: InjectionTarget,
                        dy: &Matrix,
                        agrads: &mut AdapterGrads,
                        bgrads: &mut Option<BaseModel>|
     -> Result<Matrix> {
        let g = linear_backward(dy, model.weight(t), adapters.get(t), &cache.traces[&t], want_base)?;
        if let Some(f) = g.factors {
            agrads.pairs.insert(t, f);
        }
        if let (Some(dw), Some(bg)) = (g.dw, bgrads.as_mut()) {
            let slot = match t {
                InjectionTarget::Q => &mut bg.wq,
                InjectionTarget::K => &mut bg.wk,
                InjectionTarget::V => &mut bg.wv,
                InjectionTarget::O => &mut bg.wo,
                InjectionTarget::Gate => &mut bg.w_gate,
                InjectionTarget::Up => &mut bg.w_up,
                InjectionTarget::Down => &mut bg.w_down,
            };
            *slot = dw;
        }
        Ok(g.dx)
    };

    // Head and mean-pool.
    let mut dpooled = vec![0.0; dims.d];
    for (c, &dl) in dlogits.iter().enumerate() {
        for (dp, w) in dpooled.iter_mut().zip(model.w_head.row(c)) {
            *dp += dl * w;
        }
    }
    if let Some(bg) = bgrads.as_mut() {
        for (c, &dl) in dlogits.iter().enumerate() {
            for (g, p) in bg.w_head.row_mut(c).iter_mut().zip(&cache.pooled) {
                *g = dl * p;
            }
        }
    }
    let mut dh2 = Matrix::zeros(l, dims.d);
    for r in 0..l {
        for (d, dp) in dh2.row_mut(r).iter_mut().zip(&dpooled) {
            *d = dp / l as f64;
        }
    }

    // Gated MLP with residual.
    let mut dh1 = dh2.clone();
    let dact = lin_back(InjectionTarget::Down, &dh2, &mut agrads, &mut bgrads)?;
    let mut dgate = Matrix::zeros(dact.rows(), dact.cols());
    let mut dup = Matrix::zeros(dact.rows(), dact.cols());
    for i in 0..dact.data().len() {
        let g = cache.gate.data()[i];
        let u = cache.up.data()[i];
        let sg = sigmoid(g);
        let silu = g * sg;
        let dsilu = sg * (1.0 + g * (1.0 - sg));
        dgate.data_mut()[i] = dact.data()[i] * u * dsilu;
        dup.data_mut()[i] = dact.data()[i] * silu;
    }
    let dx_gate = lin_back(InjectionTarget::Gate, &dgate, &mut agrads, &mut bgrads)?;
    let dx_up = lin_back(InjectionTarget::Up, &dup, &mut agrads, &mut bgrads)?;
    dh1.add_scaled(1.0, &dx_gate)?;
    dh1.add_scaled(1.0, &dx_up)?;

    // Attention with residual.
    let mut dx = dh1.clone();
    let datt = lin_back(InjectionTarget::O, &dh1, &mut agrads, &mut bgrads)?;
    let dprobs = matmul_nt(&datt, &cache.v)?;
    let dv = matmul_tn(&cache.probs, &datt)?;
    let c = 1.0 / (dims.d as f64).sqrt();
    let mut dscores = Matrix::zeros(l, l);
    for r in 0..l {
        let p = cache.probs.row(r);
        let dp = dprobs.row(r);
        let inner: f64 = p.iter().zip(dp).map(|(a, b)| a * b).sum();
        for (j, ds) in dscores.row_mut(r).iter_mut().enumerate() {
            *ds = c * p[j] * (dp[j] - inner);
        }
    }
    let dq = matmul(&dscores, &cache.k)?;
    let dk = matmul_tn(&dscores, &cache.q)?;
    let dx_q = lin_back(InjectionTarget::Q, &dq, &mut agrads, &mut bgrads)?;
    let dx_k = lin_back(InjectionTarget::K, &dk, &mut agrads, &mut bgrads)?;
    let dx_v = lin_back(InjectionTarget::V, &dv, &mut agrads, &mut bgrads)?;
    dx.add_scaled(1.0, &dx_q)?;
    dx.add_scaled(1.0, &dx_k)?;
    dx.add_scaled(1.0, &dx_v)?;

    if let Some(bg) = bgrads.as_mut() {
        for (i, &tok) in cache.tokens.iter().enumerate() {
            let row = dx.row(i).to_vec();
            for (g, d) in bg.embed.row_mut(tok).iter_mut().zip(row) {
                *g += d;
            }
        }
    }
    Ok((agrads, bgrads))
}

fn cross_entropy(logits: &[f64], label: usize) -> (f64, Vec<f64>) {
    let probs = softmax(logits);
    let loss = -probs[label].max(f64::MIN_POSITIVE).ln();
    let mut d = probs;
    d[label] -= 1.0;
    (loss, d)
}

pub struct LossAndGrads {
    pub loss: f64,
    pub grads: AdapterGrads,
}

/// Mean cross-entropy over `batch` and its gradient with respect to every
/// adapter factor. Dropout masks, when enabled, are keyed per example from
/// `dropout.seed`.
pub fn loss_and_grads(
    model: &BaseModel,
    adapters: &AdapterSet,
    batch: &[Example],
    dropout: Option<Dropout>,
) -> Result<LossAndGrads> {
    let (loss, grads, _) = batch_grads(model, adapters, batch, dropout, false)?;
    Ok(LossAndGrads { loss, grads })
}

fn batch_grads(
    model: &BaseModel,
    adapters: &AdapterSet,
    batch: &[Example],
    dropout: Option<Dropout>,
    want_base: bool,
) -> Result<(f64, AdapterGrads, Option<BaseModel>)> {
    if batch.is_empty() {
        return Err(FedError::Input("empty batch".into()));
    }
    let n = batch.len() as f64;
    let mut total_loss = 0.0;
    let mut grads = AdapterGrads::zeros_like(adapters);
    let mut base = want_base.then(|| model.zeros_like());
    for (i, ex) in batch.iter().enumerate() {
        if ex.label >= model.dims.classes {
            return Err(FedError::Input(format!("label {} out of range", ex.label)));
        }
        let drop = dropout.map(|d| Dropout {
            rate: d.rate,
            seed: derive_seed(d.seed, i as u64),
        });
        let out = forward(model, adapters, &ex.tokens, drop)?;
        let (loss, dlogits) = cross_entropy(&out.logits, ex.label);
        total_loss += loss;
        let (g, bg) = backward(model, adapters, &out.cache, &dlogits, want_base)?;
        grads.add_scaled(1.0 / n, &g)?;
        if let (Some(acc), Some(bg)) = (base.as_mut(), bg) {
            for (a, g) in acc.matrices_mut().into_iter().zip(bg.matrices()) {
                a.add_scaled(1.0 / n, g)?;
            }
        }
    }
    Ok((total_loss / n, grads, base))
}

pub fn predict(model: &BaseModel, adapters: &AdapterSet, tokens: &[usize]) -> Result<usize> {
    let logits = forward(model, adapters, tokens, None)?.logits;
    Ok(argmax(&logits))
}

/// Index of the largest value; ties go to the lowest index.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate().skip(1) {
        if v > values[best] {
            best = i;
        }
    }
    best
}

/// AdamW with decoupled weight decay and a linear-decay learning rate.
///
/// The schedule step counter runs across rounds; the moment estimates can be
/// reset independently.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub total_steps: u64,
    pub step: u64,
    moment_steps: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl OptimizerState {
    pub fn new(lr: f64, beta1: f64, beta2: f64, eps: f64, weight_decay: f64, total_steps: u64) -> Self {
        Self {
            lr,
            beta1,
            beta2,
            eps,
            weight_decay,
            total_steps,
            step: 0,
            moment_steps: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    pub fn current_lr(&self) -> f64 {
        self.lr * (1.0 - self.step as f64 / self.total_steps as f64)
    }

    pub fn reset_moments(&mut self) {
        self.moment_steps = 0;
        self.m.clear();
        self.v.clear();
    }

    fn apply(&mut self, params: Vec<&mut [f64]>, grads: Vec<&[f64]>) -> Result<()> {
        if self.step >= self.total_steps {
            return Err(FedError::Schedule {
                step: self.step,
                total: self.total_steps,
            });
        }
        if params.len() != grads.len() {
            return Err(FedError::Shape("parameter and gradient counts differ".into()));
        }
        if self.m.len() != params.len() {
            self.m = params.iter().map(|p| vec![0.0; p.len()]).collect();
            self.v = self.m.clone();
            self.moment_steps = 0;
        }
        let lr = self.current_lr();
        self.step += 1;
        self.moment_steps += 1;
        let t = self.moment_steps as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        for (i, (p, g)) in params.into_iter().zip(grads).enumerate() {
            if p.len() != g.len() || p.len() != self.m[i].len() {
                return Err(FedError::Shape("optimizer moment shape mismatch".into()));
            }
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            for j in 0..p.len() {
                m[j] = self.beta1 * m[j] + (1.0 - self.beta1) * g[j];
                v[j] = self.beta2 * v[j] + (1.0 - self.beta2) * g[j] * g[j];
                let m_hat = m[j] / bc1;
                let v_hat = v[j] / bc2;
                p[j] -= lr * self.weight_decay * p[j];
                p[j] -= lr * m_hat / (v_hat.sqrt() + self.eps);
            }
        }
        Ok(())
    }
}

/// One optimizer step from gradients summed over `micro_batches`
/// accumulation steps.
pub fn train_step(
    adapters: &mut AdapterSet,
    summed_grads: &AdapterGrads,
    opt: &mut OptimizerState,
    micro_batches: usize,
) -> Result<()> {
    if micro_batches == 0 {
        return Err(FedError::Input("accumulation over zero micro-batches".into()));
    }
    if summed_grads.pairs.keys().ne(adapters.pairs.keys()) {
        return Err(FedError::Shape("gradient targets do not match adapters".into()));
    }
    let mut mean = summed_grads.clone();
    mean.scale(1.0 / micro_batches as f64);
    opt.apply(adapters.params_mut(), mean.slices())
}

/// Local fine-tuning hyperparameters.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LocalTraining {
    pub epochs: usize,
    pub accumulation: usize,
    pub dropout: f64,
}

/// Optimizer steps per epoch at batch size 1 with gradient accumulation.
pub fn steps_per_epoch(n_examples: usize, accumulation: usize) -> u64 {
    n_examples.div_ceil(accumulation.max(1)) as u64
}

/// Runs `settings.epochs` epochs of batch-1 training with gradient
/// accumulation over `train`, shuffling each epoch from `seed`.
pub fn train_local(
    model: &BaseModel,
    adapters: &mut AdapterSet,
    train: &[Example],
    settings: LocalTraining,
    opt: &mut OptimizerState,
    seed: u64,
) -> Result<f64> {
    let mut last_loss = f64::NAN;
    if train.is_empty() {
        return Ok(last_loss);
    }
    let accumulation = settings.accumulation.max(1);
    for epoch in 0..settings.epochs {
        let mut order: Vec<usize> = (0..train.len()).collect();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(derive_seed(seed, epoch as u64)));
        let mut epoch_loss = 0.0;
        for (chunk_idx, chunk) in order.chunks(accumulation).enumerate() {
            let mut summed = AdapterGrads::zeros_like(adapters);
            for (j, &idx) in chunk.iter().enumerate() {
                let drop = (settings.dropout > 0.0).then(|| Dropout {
                    rate: settings.dropout,
                    seed: crate::derive_seed_path(seed, &[epoch as u64, chunk_idx as u64, j as u64]),
                });
                let lg = loss_and_grads(model, adapters, std::slice::from_ref(&train[idx]), drop)?;
                epoch_loss += lg.loss;
                summed.add_scaled(1.0, &lg.grads)?;
            }
            train_step(adapters, &summed, opt, chunk.len())?;
        }
        last_loss = epoch_loss / train.len() as f64;
    }
    Ok(last_loss)
}

/// Full-weight pretraining settings for the frozen base.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PretrainSettings {
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
}

impl Default for PretrainSettings {
    fn default() -> Self {
        Self {
            steps: 150,
            batch_size: 16,
            lr: 1e-2,
        }
    }
}

/// Trains every weight on the pooled training data of `task`, then returns
/// the result as an immutable base model.
pub fn pretrain_base(
    task: &TaskSpec,
    dims: ModelDims,
    settings: PretrainSettings,
    seed: u64,
) -> Result<BaseModel> {
    if dims.vocab != task.vocab || dims.classes != task.classes || dims.seq_len != task.seq_len {
        return Err(FedError::Config("model dims disagree with task spec".into()));
    }
    let mut model = BaseModel::init(dims, derive_seed(seed, 1));
    if settings.steps == 0 {
        return Ok(model);
    }
    let shards = data::generate(task)?;
    let pool = data::pooled(&shards, derive_seed(seed, 2))?;
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, 3));
    let mut opt = OptimizerState::new(settings.lr, 0.9, 0.999, 1e-8, 0.0, settings.steps as u64);
    let empty = AdapterSet::empty();
    let batch_size = settings.batch_size.max(1);
    for _ in 0..settings.steps {
        let batch: Vec<Example> = (0..batch_size)
            .map(|_| pool[rng.random_range(0..pool.len())].clone())
            .collect();
        let (_, _, grads) = batch_grads(&model, &empty, &batch, None, true)?;
        let grads = grads.expect("base gradients requested");
        let grad_slices: Vec<&[f64]> = grads.matrices().iter().map(|m| m.data()).collect();
        let params: Vec<&mut [f64]> = model.matrices_mut().into_iter().map(|m| m.data_mut()).collect();
        opt.apply(params, grad_slices)?;
    }
    Ok(model)
}

#[cfg(test)]
mod tests {
    use super::*;
    use fedlora_oracle as oracle;

    fn toy_dims() -> ModelDims {
        ModelDims {
            vocab: 10,
            d: 4,
            hidden: 8,
            classes: 3,
            seq_len: 5,
        }
    }

    fn random_adapters(dims: &ModelDims, rank: usize, seed: u64) -> AdapterSet {
        let pairs = InjectionTarget::ALL.into_iter().map(|t| {
            let (d_out, d_in) = t.shape(dims);
            let a = random_init(rank, d_in, 0.5, derive_seed(seed, 10 + t as u64));
            let b = random_init(d_out, rank, 0.5, derive_seed(seed, 20 + t as u64));
            AdapterPair::new(t, a, b, 4.0, ScalingMode::AlphaOverR).unwrap()
        });
        AdapterSet::from_pairs(pairs).unwrap()
    }

    #[test]
    fn target_names_roundtrip() {
        for t in InjectionTarget::ALL {
            assert_eq!(t.name().parse::<InjectionTarget>().unwrap(), t);
        }
        assert!("mlp".parse::<InjectionTarget>().is_err());
    }

    #[test]
    fn adapted_matrix_zero_b_is_base() {
        let w = random_init(4, 3, 1.0, 1);
        let pair = AdapterPair::new(
            InjectionTarget::Q,
            random_init(2, 3, 1.0, 2),
            Matrix::zeros(4, 2),
            8.0,
            ScalingMode::AlphaOverR,
        )
        .unwrap();
        assert_eq!(adapted_matrix(&w, &pair).unwrap(), w);
    }

    #[test]
    fn adapted_matrix_scalar() {
        let one = |v| Matrix::new(1, 1, vec![v]).unwrap();
        let pair = AdapterPair::new(InjectionTarget::Q, one(2.0), one(3.0), 2.0, ScalingMode::AlphaOverR).unwrap();
        assert_eq!(adapted_matrix(&one(1.0), &pair).unwrap().data(), &[13.0]);
        // Literal `alpha · BA` convention.
        let literal = AdapterPair { scaling: ScalingMode::Alpha, ..pair };
        assert_eq!(adapted_matrix(&one(1.0), &literal).unwrap().data(), &[13.0]);
    }

    #[test]
    fn adapted_matrix_matches_composition() {
        let w = random_init(4, 3, 1.0, 5);
        let a = random_init(2, 3, 1.0, 6);
        let b = random_init(4, 2, 1.0, 7);
        let pair = AdapterPair::new(InjectionTarget::Gate, a.clone(), b.clone(), 32.0, ScalingMode::AlphaOverR).unwrap();
        let ba = oracle::triple_loop_matmul(&b.to_rows(), &a.to_rows());
        let s = 32.0 / 2.0;
        let got = adapted_matrix(&w, &pair).unwrap();
        for r in 0..4 {
            for c in 0..3 {
                assert!((got.get(r, c) - (w.get(r, c) + s * ba[r][c])).abs() < 1e-12);
            }
        }
        assert!(adapted_matrix(&Matrix::zeros(3, 3), &pair).is_err());
    }

    #[test]
    fn zero_adapters_match_base_forward() {
        let dims = toy_dims();
        let model = BaseModel::init(dims, 3);
        let adapters = AdapterSet::init(&dims, &InjectionTarget::ALL, 2, 8.0, ScalingMode::AlphaOverR, 4).unwrap();
        let tokens = [1, 4, 9, 0, 3];
        let with = forward(&model, &adapters, &tokens, None).unwrap().logits;
        let without = forward(&model, &AdapterSet::empty(), &tokens, None).unwrap().logits;
        assert_eq!(with, without);
    }

    #[test]
    fn dropout_is_deterministic_per_seed() {
        let dims = toy_dims();
        let model = BaseModel::init(dims, 3);
        let adapters = random_adapters(&dims, 2, 8);
        let tokens = [1, 4, 9, 0, 3];
        let d = Some(Dropout { rate: 0.5, seed: 42 });
        let a = forward(&model, &adapters, &tokens, d).unwrap().logits;
        let b = forward(&model, &adapters, &tokens, d).unwrap().logits;
        assert_eq!(a, b);
        let c = forward(&model, &adapters, &tokens, Some(Dropout { rate: 0.5, seed: 43 })).unwrap().logits;
        assert_ne!(a, c);
    }

    #[test]
    fn rejects_bad_tokens() {
        let dims = toy_dims();
        let model = BaseModel::init(dims, 3);
        let err = forward(&model, &AdapterSet::empty(), &[1, 2, 3, 4, 10], None);
        assert!(matches!(err, Err(FedError::Input(_))));
        let err = forward(&model, &AdapterSet::empty(), &[1, 2, 3], None);
        assert!(matches!(err, Err(FedError::Input(_))));
    }

    /// seq_len = 1, d = 2, classes = 2 written out scalar by scalar.
    #[test]
    fn hand_unrolled_forward() {
        let dims = ModelDims {
            vocab: 3,
            d: 2,
            hidden: 2,
            classes: 2,
            seq_len: 1,
        };
        let model = BaseModel::init(dims, 17);
        let adapters = random_adapters(&dims, 1, 5);
        let tok = 2;
        let x = model.embed.row(tok).to_vec();
        let eff = |t: InjectionTarget| adapted_matrix(model.weight(t), adapters.get(t).unwrap()).unwrap();
        let mv = |m: &Matrix, v: &[f64]| -> Vec<f64> {
            (0..m.rows()).map(|r| m.get(r, 0) * v[0] + m.get(r, 1) * v[1]).collect()
        };
        // A single position attends only to itself, so attention output is v.
        let v = mv(&eff(InjectionTarget::V), &x);
        let o = mv(&eff(InjectionTarget::O), &v);
        let h1 = [x[0] + o[0], x[1] + o[1]];
        let g = mv(&eff(InjectionTarget::Gate), &h1);
        let u = mv(&eff(InjectionTarget::Up), &h1);
        let act: Vec<f64> = (0..2).map(|i| g[i] / (1.0 + (-g[i]).exp()) * u[i]).collect();
        let dn = mv(&eff(InjectionTarget::Down), &act);
        let h2 = [h1[0] + dn[0], h1[1] + dn[1]];
        let logits = mv(&model.w_head, &h2);
        let got = forward(&model, &adapters, &[tok], None).unwrap().logits;
        for (a, b) in got.iter().zip(&logits) {
            assert!((a - b).abs() < 1e-10, "{a} vs {b}");
        }
    }

    #[test]
    fn uniform_logits_loss_is_ln_c() {
        let dims = toy_dims();
        let mut model = BaseModel::init(dims, 3);
        model.w_head = Matrix::zeros(dims.classes, dims.d);
        let ex = Example {
            tokens: vec![0, 1, 2, 3, 4],
            label: 1,
        };
        let lg = loss_and_grads(&model, &AdapterSet::empty(), &[ex], None).unwrap();
        assert!((lg.loss - (3.0f64).ln()).abs() < 1e-12);
    }

    #[test]
    fn empty_batch_is_error() {
        let dims = toy_dims();
        let model = BaseModel::init(dims, 3);
        assert!(matches!(
            loss_and_grads(&model, &AdapterSet::empty(), &[], None),
            Err(FedError::Input(_))
        ));
    }

    #[test]
    fn duplicated_batch_same_loss_and_grads() {
        let dims = toy_dims();
        let model = BaseModel::init(dims, 3);
        let adapters = random_adapters(&dims, 2, 1);
        let batch = vec![
            Example { tokens: vec![0, 1, 2, 3, 4], label: 1 },
            Example { tokens: vec![5, 6, 7, 8, 9], label: 2 },
        ];
        let doubled: Vec<Example> = batch.iter().flat_map(|e| [e.clone(), e.clone()]).collect();
        let a = loss_and_grads(&model, &adapters, &batch, None).unwrap();
        let b = loss_and_grads(&model, &adapters, &doubled, None).unwrap();
        assert!((a.loss - b.loss).abs() < 1e-12);
        for (t, g) in &a.grads.pairs {
            let h = &b.grads.pairs[t];
            assert!(g.a.sub(&h.a).unwrap().frobenius_norm() < 1e-12);
            assert!(g.b.sub(&h.b).unwrap().frobenius_norm() < 1e-12);
        }
    }

    #[test]
    fn base_gradients_match_finite_differences() {
        let dims = toy_dims();
        let model = BaseModel::init(dims, 21);
        let batch = vec![
            Example { tokens: vec![0, 1, 2, 3, 4], label: 1 },
            Example { tokens: vec![9, 1, 1, 7, 4], label: 0 },
        ];
        let empty = AdapterSet::empty();
        let (_, _, grads) = batch_grads(&model, &empty, &batch, None, true).unwrap();
        let grads = grads.unwrap();
        for (which, g) in grads.matrices().iter().enumerate() {
            let x: Vec<f64> = model.matrices()[which].data().to_vec();
            for idx in (0..x.len()).step_by(3) {
                let f = |p: &[f64]| {
                    let mut m = model.clone();
                    m.matrices_mut()[which].data_mut().copy_from_slice(p);
                    batch_grads(&m, &empty, &batch, None, false).unwrap().0
                };
                let fd = oracle::central_difference(f, &x, idx, 1e-5);
                let an = g.data()[idx];
                assert!((fd - an).abs() <= 1e-6 * (1.0 + an.abs()), "matrix {which} idx {idx}: {an} vs {fd}");
            }
        }
    }

    #[test]
    fn adamw_zero_grad_is_fixed_point() {
        let dims = toy_dims();
        let mut adapters = random_adapters(&dims, 2, 1);
        let before = adapters.clone();
        let mut opt = OptimizerState::new(1e-2, 0.9, 0.999, 1e-8, 0.0, 10);
        train_step(&mut adapters, &AdapterGrads::zeros_like(&before), &mut opt, 1).unwrap();
        assert_eq!(adapters, before);
    }

    #[test]
    fn adamw_first_step_matches_closed_form() {
        let one = |v| Matrix::new(1, 1, vec![v]).unwrap();
        let pair = AdapterPair::new(InjectionTarget::Q, one(0.7), one(-0.3), 1.0, ScalingMode::AlphaOverR).unwrap();
        let mut set = AdapterSet::from_pairs([pair]).unwrap();
        let mut grads = AdapterGrads::zeros_like(&set);
        grads.pairs.get_mut(&InjectionTarget::Q).unwrap().a = one(0.25);
        grads.pairs.get_mut(&InjectionTarget::Q).unwrap().b = one(-2.0);
        let mut opt = OptimizerState::new(3e-3, 0.9, 0.999, 1e-8, 0.01, 100);
        train_step(&mut set, &grads, &mut opt, 1).unwrap();
        let p = set.get(InjectionTarget::Q).unwrap();
        let ea = oracle::adamw_first_step_scalar(0.7, 0.25, 3e-3, 0.9, 0.999, 1e-8, 0.01);
        let eb = oracle::adamw_first_step_scalar(-0.3, -2.0, 3e-3, 0.9, 0.999, 1e-8, 0.01);
        assert!((p.a.get(0, 0) - ea).abs() < 1e-15);
        assert!((p.b.get(0, 0) - eb).abs() < 1e-15);
    }

    #[test]
    fn accumulation_matches_concatenated_batch() {
        let dims = toy_dims();
        let model = BaseModel::init(dims, 3);
        let start = random_adapters(&dims, 2, 1);
        let e1 = Example { tokens: vec![0, 1, 2, 3, 4], label: 1 };
        let e2 = Example { tokens: vec![5, 6, 7, 8, 9], label: 2 };

        let mut accumulated = start.clone();
        let mut opt1 = OptimizerState::new(1e-2, 0.9, 0.999, 1e-8, 0.0, 5);
        let mut sum = loss_and_grads(&model, &start, &[e1.clone()], None).unwrap().grads;
        sum.add_scaled(1.0, &loss_and_grads(&model, &start, &[e2.clone()], None).unwrap().grads).unwrap();
        train_step(&mut accumulated, &sum, &mut opt1, 2).unwrap();

        let mut joint = start.clone();
        let mut opt2 = OptimizerState::new(1e-2, 0.9, 0.999, 1e-8, 0.0, 5);
        let g = loss_and_grads(&model, &start, &[e1, e2], None).unwrap().grads;
        train_step(&mut joint, &g, &mut opt2, 1).unwrap();

        for (t, p) in &accumulated.pairs {
            let q = &joint.pairs[t];
            assert!(p.a.sub(&q.a).unwrap().frobenius_norm() < 1e-12);
            assert!(p.b.sub(&q.b).unwrap().frobenius_norm() < 1e-12);
        }
    }

    #[test]
    fn schedule_decays_and_exhausts() {
        let dims = toy_dims();
        let mut adapters = random_adapters(&dims, 2, 1);
        let grads = AdapterGrads::zeros_like(&adapters);
        let mut opt = OptimizerState::new(1.0, 0.9, 0.999, 1e-8, 0.0, 4);
        let mut lrs = Vec::new();
        for _ in 0..4 {
            lrs.push(opt.current_lr());
            train_step(&mut adapters, &grads, &mut opt, 1).unwrap();
        }
        assert_eq!(lrs, vec![1.0, 0.75, 0.5, 0.25]);
        assert!(matches!(
            train_step(&mut adapters, &grads, &mut opt, 1),
            Err(FedError::Schedule { step: 4, total: 4 })
        ));
    }

    #[test]
    fn rank_of_delta_bounded() {
        let dims = ModelDims::default();
        let set = random_adapters(&dims, 3, 2);
        for p in set.pairs.values() {
            let delta = p.delta();
            let k = delta.rows().min(delta.cols());
            let s = crate::linalg::truncated_svd(&delta, k).unwrap().singular_values;
            assert!(s[3..].iter().all(|&x| x < 1e-9 * s[0]));
        }
    }

    #[test]
    fn training_never_touches_base() {
        let dims = toy_dims();
        let model = BaseModel::init(dims, 3);
        let before = model.to_bytes();
        let mut adapters = AdapterSet::init(&dims, &InjectionTarget::ALL, 2, 8.0, ScalingMode::AlphaOverR, 4).unwrap();
        let train: Vec<Example> = (0..6)
            .map(|i| Example { tokens: vec![i % 10, 1, 2, 3, (i * 3) % 10], label: i % 3 })
            .collect();
        let settings = LocalTraining { epochs: 2, accumulation: 4, dropout: 0.1 };
        let mut opt = OptimizerState::new(1e-2, 0.9, 0.999, 1e-8, 0.01, 2 * steps_per_epoch(6, 4));
        train_local(&model, &mut adapters, &train, settings, &mut opt, 9).unwrap();
        assert_eq!(model.to_bytes(), before);
        assert_eq!(opt.step, 4);
    }
}
