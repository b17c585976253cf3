//! Channel-wise tokenized encoder with CNN-autoencoder score attention.
//!
//! Each of the `N` variates is embedded as one token of width `D`. Inside a
//! block the score network treats the `N` tokens as convolution channels and
//! slides its kernel along the hidden dimension, so every output row mixes
//! every input row. The gate `softmax(score)` multiplies the value projection
//! element-wise. The conventional dot-product block is kept as a baseline.

use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec::Vec;

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::nn::{BoundParams, Conv1dParams, LayerNormParams, LinearParams, ParamSet, RevinParams};
use crate::tape::{reborrow, Tape, Var};
use crate::tensor::Tensor;
use crate::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AttentionKind {
    /// CNN-autoencoder score gate.
    Casa,
    /// Conventional `softmax(QKᵀ/√D)·V`.
    Baseline,
}

impl AttentionKind {
    pub fn as_str(self) -> &'static str {
        match self {
            AttentionKind::Casa => "casa",
            AttentionKind::Baseline => "baseline",
        }
    }
}

impl core::str::FromStr for AttentionKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "casa" => Ok(AttentionKind::Casa),
            "baseline" => Ok(AttentionKind::Baseline),
            _ => Err(Error::InvalidConfig(format!(
                "unknown attention kind `{s}`"
            ))),
        }
    }
}

/// Axis of the `N×D` score map the gate softmax normalizes over.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SoftmaxAxis {
    /// Each variate row sums to one across the hidden dimension.
    Hidden,
    /// Each hidden column sums to one across variates.
    Variate,
}

impl SoftmaxAxis {
    pub fn as_str(self) -> &'static str {
        match self {
            SoftmaxAxis::Hidden => "hidden",
            SoftmaxAxis::Variate => "variate",
        }
    }

    fn index(self) -> usize {
        match self {
            SoftmaxAxis::Variate => 0,
            SoftmaxAxis::Hidden => 1,
        }
    }
}

impl core::str::FromStr for SoftmaxAxis {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "hidden" | "D" => Ok(SoftmaxAxis::Hidden),
            "variate" | "N" => Ok(SoftmaxAxis::Variate),
            _ => Err(Error::InvalidConfig(format!("unknown softmax axis `{s}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    /// `N`, number of variates (tokens).
    pub n_vars: usize,
    /// `L`, lookback length.
    pub input_len: usize,
    /// `H`, forecast horizon.
    pub horizon: usize,
    /// `D`, token width.
    pub d_model: usize,
    /// `M`, number of encoder blocks.
    pub n_blocks: usize,
    /// `k`, score-network kernel size (odd).
    pub kernel_size: usize,
    /// Hidden channel count of the score autoencoder.
    pub score_hidden: usize,
    /// Number of stacked encoder/decoder conv pairs in the score network.
    pub ae_depth: usize,
    pub ffn_dim: usize,
    /// Dropout on the attention output and inside the FFN.
    pub dropout: f64,
    /// Dropout after the score encoder activation.
    pub score_dropout: f64,
    pub softmax_axis: SoftmaxAxis,
    pub use_revin: bool,
    pub attention: AttentionKind,
}

impl ModelConfig {
    /// Desk-scale defaults: `D=128, M=2, k=3`, score hidden width `D`,
    /// FFN width `2D`, dropout 0.1.
    pub fn new(n_vars: usize, input_len: usize, horizon: usize) -> Self {
        let d_model = 128;
        ModelConfig {
            n_vars,
            input_len,
            horizon,
            d_model,
            n_blocks: 2,
            kernel_size: 3,
            score_hidden: d_model,
            ae_depth: 1,
            ffn_dim: 2 * d_model,
            dropout: 0.1,
            score_dropout: 0.0,
            softmax_axis: SoftmaxAxis::Hidden,
            use_revin: true,
            attention: AttentionKind::Casa,
        }
    }

    /// Sets `D` and the widths derived from it (score hidden `D`, FFN `2D`).
    pub fn with_d_model(mut self, d: usize) -> Self {
        self.d_model = d;
        self.score_hidden = d;
        self.ffn_dim = 2 * d;
        self
    }

    pub fn validate(&self) -> Result<()> {
        let dims = [
            ("N", self.n_vars),
            ("L", self.input_len),
            ("H", self.horizon),
            ("D", self.d_model),
            ("M", self.n_blocks),
            ("k", self.kernel_size),
            ("c_hid", self.score_hidden),
            ("ae_depth", self.ae_depth),
            ("ffn_dim", self.ffn_dim),
        ];
        if let Some((name, _)) = dims.iter().find(|(_, v)| *v == 0) {
            return Err(Error::InvalidConfig(format!("{name} must be positive")));
        }
        if self.kernel_size.is_multiple_of(2) {
            return Err(Error::InvalidKernel(self.kernel_size));
        }
        if self.use_revin && self.input_len < 2 {
            return Err(Error::InvalidConfig("RevIN needs L >= 2".to_string()));
        }
        for (name, rate) in [
            ("dropout", self.dropout),
            ("score_dropout", self.score_dropout),
        ] {
            if !(0.0..1.0).contains(&rate) {
                return Err(Error::InvalidConfig(format!("{name} must lie in [0, 1)")));
            }
        }
        Ok(())
    }
}

/// Inverted-bottleneck 1D CNN autoencoder: conv `N→c_hid`, GELU, conv
/// `c_hid→N`, repeated `ae_depth` times.
#[derive(Clone, Debug, PartialEq)]
pub struct ScoreNetwork {
    pub stages: Vec<(Conv1dParams, Conv1dParams)>,
    pub dropout: f64,
}

impl ScoreNetwork {
    pub fn new(
        params: &mut ParamSet,
        name: &str,
        cfg: &ModelConfig,
        rng: &mut dyn RngCore,
    ) -> Result<Self> {
        // A per-row constant is invisible to a row softmax, so the decoder
        // bias only exists when the gate normalizes across variates.
        let dec_bias = cfg.softmax_axis == SoftmaxAxis::Variate;
        let stages = (0..cfg.ae_depth)
            .map(|i| {
                let enc = Conv1dParams::new(
                    params,
                    &format!("{name}.{i}.enc"),
                    cfg.n_vars,
                    cfg.score_hidden,
                    cfg.kernel_size,
                    true,
                    rng,
                )?;
                let dec = Conv1dParams::new(
                    params,
                    &format!("{name}.{i}.dec"),
                    cfg.score_hidden,
                    cfg.n_vars,
                    cfg.kernel_size,
                    dec_bias,
                    rng,
                )?;
                Ok((enc, dec))
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(ScoreNetwork {
            stages,
            dropout: cfg.score_dropout,
        })
    }

    pub fn forward(
        &self,
        tape: &mut Tape<'_>,
        p: &BoundParams,
        z: Var,
        mut rng: Option<&mut dyn RngCore>,
    ) -> Result<Var> {
        let mut h = z;
        for (i, (enc, dec)) in self.stages.iter().enumerate() {
            if i > 0 {
                h = tape.gelu(h);
            }
            h = enc.forward(tape, p, h)?;
            h = tape.gelu(h);
            h = tape.dropout(h, self.dropout, reborrow(&mut rng))?;
            h = dec.forward(tape, p, h)?;
        }
        Ok(h)
    }
}

/// `softmax(Score(Z)) ⊛ f(Z)`.
#[derive(Clone, Debug, PartialEq)]
pub struct ScoreAttention {
    pub score: ScoreNetwork,
    pub value: LinearParams,
    pub softmax_axis: SoftmaxAxis,
}

impl ScoreAttention {
    pub fn new(
        params: &mut ParamSet,
        name: &str,
        cfg: &ModelConfig,
        rng: &mut dyn RngCore,
    ) -> Result<Self> {
        Ok(ScoreAttention {
            score: ScoreNetwork::new(params, &format!("{name}.score"), cfg, rng)?,
            value: LinearParams::new(
                params,
                &format!("{name}.value"),
                cfg.d_model,
                cfg.d_model,
                rng,
            ),
            softmax_axis: cfg.softmax_axis,
        })
    }

    /// Returns the attention output and the gate.
    pub fn forward(
        &self,
        tape: &mut Tape<'_>,
        p: &BoundParams,
        z: Var,
        rng: Option<&mut dyn RngCore>,
    ) -> Result<(Var, Var)> {
        let score = self.score.forward(tape, p, z, rng)?;
        let gate = tape.softmax(score, self.softmax_axis.index())?;
        let value = self.value.forward(tape, p, z)?;
        Ok((tape.mul(gate, value)?, gate))
    }
}

/// Single-head dot-product self-attention over variate tokens, `d_k = D`.
#[derive(Clone, Debug, PartialEq)]
pub struct SelfAttention {
    pub query: LinearParams,
    pub key: LinearParams,
    pub value: LinearParams,
}

impl SelfAttention {
    pub fn new(params: &mut ParamSet, name: &str, d: usize, rng: &mut dyn RngCore) -> Self {
        SelfAttention {
            query: LinearParams::new(params, &format!("{name}.query"), d, d, rng),
            key: LinearParams::new(params, &format!("{name}.key"), d, d, rng),
            value: LinearParams::new(params, &format!("{name}.value"), d, d, rng),
        }
    }

    /// Returns the attention output and the `N×N` attention map.
    pub fn forward(&self, tape: &mut Tape<'_>, p: &BoundParams, z: Var) -> Result<(Var, Var)> {
        let d = self.query.d_out as f64;
        let q = self.query.forward(tape, p, z)?;
        let k = self.key.forward(tape, p, z)?;
        let v = self.value.forward(tape, p, z)?;
        let kt = tape.transpose(k)?;
        let logits = tape.matmul(q, kt)?;
        let logits = tape.scale(logits, 1.0 / libm::sqrt(d));
        let attn = tape.softmax(logits, 1)?;
        Ok((tape.matmul(attn, v)?, attn))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum Attention {
    Score(ScoreAttention),
    Dot(SelfAttention),
}

/// Post-norm encoder layer with a swappable attention sublayer:
/// `u = LN(z + drop(attn(z)))`, `out = LN(u + drop(FFN(u)))`.
#[derive(Clone, Debug, PartialEq)]
pub struct EncoderBlock {
    pub attention: Attention,
    pub norm1: LayerNormParams,
    pub ffn_in: LinearParams,
    pub ffn_out: LinearParams,
    pub norm2: LayerNormParams,
    pub dropout: f64,
}

impl EncoderBlock {
    pub fn new(
        params: &mut ParamSet,
        name: &str,
        cfg: &ModelConfig,
        rng: &mut dyn RngCore,
    ) -> Result<Self> {
        let attention = match cfg.attention {
            AttentionKind::Casa => Attention::Score(ScoreAttention::new(
                params,
                &format!("{name}.attn"),
                cfg,
                rng,
            )?),
            AttentionKind::Baseline => Attention::Dot(SelfAttention::new(
                params,
                &format!("{name}.attn"),
                cfg.d_model,
                rng,
            )),
        };
        let norm1 = LayerNormParams::new(params, &format!("{name}.norm1"), cfg.d_model);
        let ffn_in = LinearParams::new(
            params,
            &format!("{name}.ffn.0"),
            cfg.d_model,
            cfg.ffn_dim,
            rng,
        );
        let ffn_out = LinearParams::new(
            params,
            &format!("{name}.ffn.1"),
            cfg.ffn_dim,
            cfg.d_model,
            rng,
        );
        let norm2 = LayerNormParams::new(params, &format!("{name}.norm2"), cfg.d_model);
        Ok(EncoderBlock {
            attention,
            norm1,
            ffn_in,
            ffn_out,
            norm2,
            dropout: cfg.dropout,
        })
    }

    pub fn attend(
        &self,
        tape: &mut Tape<'_>,
        p: &BoundParams,
        z: Var,
        rng: Option<&mut dyn RngCore>,
    ) -> Result<Var> {
        match &self.attention {
            Attention::Score(a) => a.forward(tape, p, z, rng).map(|(out, _)| out),
            Attention::Dot(a) => a.forward(tape, p, z).map(|(out, _)| out),
        }
    }

    pub fn forward(
        &self,
        tape: &mut Tape<'_>,
        p: &BoundParams,
        z: Var,
        mut rng: Option<&mut dyn RngCore>,
    ) -> Result<Var> {
        let a = self.attend(tape, p, z, reborrow(&mut rng))?;
        let a = tape.dropout(a, self.dropout, reborrow(&mut rng))?;
        let u = tape.add(z, a)?;
        let u = self.norm1.forward(tape, p, u)?;
        let f = self.ffn_in.forward(tape, p, u)?;
        let f = tape.gelu(f);
        let f = tape.dropout(f, self.dropout, reborrow(&mut rng))?;
        let f = self.ffn_out.forward(tape, p, f)?;
        let f = tape.dropout(f, self.dropout, reborrow(&mut rng))?;
        let out = tape.add(u, f)?;
        self.norm2.forward(tape, p, out)
    }
}

/// Output of [`CasaModel::forward`].
#[derive(Debug)]
pub struct ForwardPass {
    pub output: Var,
    pub params: BoundParams,
}

#[derive(Clone, Debug, PartialEq)]
pub struct CasaModel {
    config: ModelConfig,
    params: ParamSet,
    revin: Option<RevinParams>,
    embed: LinearParams,
    blocks: Vec<EncoderBlock>,
    predictor: LinearParams,
}

impl CasaModel {
    /// Builds and initializes a model; weights are uniform in `±1/√fan_in`,
    /// biases zero, norms identity. Initial values are f32-representable so
    /// 32-bit checkpoints round-trip exactly.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamSet::new();
        let revin = config
            .use_revin
            .then(|| RevinParams::new(&mut params, "revin", config.n_vars));
        let embed = LinearParams::new(
            &mut params,
            "embed",
            config.input_len,
            config.d_model,
            &mut rng,
        );
        let blocks = (0..config.n_blocks)
            .map(|i| EncoderBlock::new(&mut params, &format!("blocks.{i}"), &config, &mut rng))
            .collect::<Result<Vec<_>>>()?;
        let predictor = LinearParams::new(
            &mut params,
            "predictor",
            config.d_model,
            config.horizon,
            &mut rng,
        );
        params.round_to_f32();
        Ok(CasaModel {
            config,
            params,
            revin,
            embed,
            blocks,
            predictor,
        })
    }

    /// Rebuilds a model from stored parameters. Names and shapes must match
    /// what `config` produces.
    pub fn from_params(config: ModelConfig, stored: ParamSet) -> Result<Self> {
        let mut model = Self::new(config, 0)?;
        if stored.len() != model.params.len() {
            return Err(Error::InvalidConfig(format!(
                "expected {} parameter tensors, found {}",
                model.params.len(),
                stored.len()
            )));
        }
        for idx in 0..stored.len() {
            let name = stored.name_at(idx);
            let slot = model
                .params
                .position(name)
                .ok_or_else(|| Error::InvalidConfig(format!("unexpected parameter `{name}`")))?;
            let expected = model.params.value_at(slot);
            let got = stored.value_at(idx);
            if expected.shape() != got.shape() {
                return Err(Error::ShapeMismatch {
                    op: "load parameter",
                    lhs: expected.shape().to_vec(),
                    rhs: got.shape().to_vec(),
                });
            }
            *model.params.value_at_mut(slot) = got.clone();
        }
        Ok(model)
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamSet {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamSet {
        &mut self.params
    }

    pub fn blocks(&self) -> &[EncoderBlock] {
        &self.blocks
    }

    pub fn embed(&self) -> &LinearParams {
        &self.embed
    }

    pub fn predictor(&self) -> &LinearParams {
        &self.predictor
    }

    pub fn num_params(&self) -> usize {
        self.params.num_scalars()
    }

    fn check_input(&self, x: &Tensor) -> Result<()> {
        let expected = [self.config.n_vars, self.config.input_len];
        if x.shape() != expected {
            return Err(Error::ConfigMismatch {
                expected: expected.to_vec(),
                got: x.shape().to_vec(),
            });
        }
        Ok(())
    }

    /// Channel-wise embedding of one instance: row `r` of the result depends
    /// only on row `r` of the input.
    pub fn embed_series(&self, tape: &mut Tape<'_>, p: &BoundParams, x: Var) -> Result<Var> {
        self.embed.forward(tape, p, x)
    }

    /// Records `x[N, L] -> ŷ[N, H]` on `tape`. `rng = None` runs in
    /// evaluation mode (no dropout).
    pub fn forward<'a>(
        &'a self,
        tape: &mut Tape<'a>,
        x: &Tensor,
        mut rng: Option<&mut dyn RngCore>,
    ) -> Result<ForwardPass> {
        self.check_input(x)?;
        let p = self.params.bind(tape);
        let (input, state) = match &self.revin {
            Some(revin) => {
                let (v, s) = revin.normalize(tape, &p, x)?;
                (v, Some(s))
            }
            None => (tape.constant(x.clone()), None),
        };
        let mut z = self.embed_series(tape, &p, input)?;
        for block in &self.blocks {
            z = block.forward(tape, &p, z, reborrow(&mut rng))?;
        }
        let mut y = self.predictor.forward(tape, &p, z)?;
        if let (Some(revin), Some(state)) = (&self.revin, &state) {
            y = revin.denormalize(tape, &p, y, state)?;
        }
        Ok(ForwardPass {
            output: y,
            params: p,
        })
    }

    /// Evaluation-mode forecast.
    pub fn predict(&self, x: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::new();
        let fp = self.forward(&mut tape, x, None)?;
        Ok(tape.value(fp.output).clone())
    }

    /// Evaluation-mode MSE against `target[N, H]`.
    pub fn loss(&self, x: &Tensor, target: &Tensor) -> Result<f64> {
        let pred = self.predict(x)?;
        let diff = crate::tensor::sub(&pred, target)?;
        Ok(diff.data().iter().map(|d| d * d).sum::<f64>() / diff.numel() as f64)
    }

    /// MSE loss and its gradient for every parameter, in [`ParamSet`] order.
    /// Dropout is active when `rng` is supplied.
    pub fn loss_and_gradients(
        &self,
        x: &Tensor,
        target: &Tensor,
        rng: Option<&mut dyn RngCore>,
    ) -> Result<(f64, Vec<Tensor>)> {
        let mut tape = Tape::new();
        let fp = self.forward(&mut tape, x, rng)?;
        let t = tape.constant(target.clone());
        let loss = tape.mse(fp.output, t)?;
        let grads = tape.backward(loss)?;
        let out = fp
            .params
            .vars()
            .iter()
            .map(|&v| grads.get_or_zeros(&tape, v))
            .collect();
        Ok((tape.value(loss).data()[0], out))
    }

    pub fn loss_gradients(&self, x: &Tensor, target: &Tensor) -> Result<Vec<Tensor>> {
        self.loss_and_gradients(x, target, None).map(|(_, g)| g)
    }
}

/// Evaluates a score network on a constant `z` outside any training graph.
pub fn score_map(params: &ParamSet, net: &ScoreNetwork, z: &Tensor) -> Result<Tensor> {
    let mut tape = Tape::new();
    let p = params.bind(&mut tape);
    let zv = tape.constant(z.clone());
    let s = net.forward(&mut tape, &p, zv, None)?;
    Ok(tape.value(s).clone())
}

/// Evaluates an affine projection on a constant `z`.
pub fn project(params: &ParamSet, proj: &LinearParams, z: &Tensor) -> Result<Tensor> {
    let mut tape = Tape::new();
    let p = params.bind(&mut tape);
    let zv = tape.constant(z.clone());
    let y = proj.forward(&mut tape, &p, zv)?;
    Ok(tape.value(y).clone())
}

/// True iff perturbing any single row `s` of `z` leaves every other output
/// row of `f` bit-identical, over `trials` random perturbations per row.
///
/// Rows of `z` are the tokens: variates for channel-wise layouts, time
/// steps or patches for point- and patch-wise layouts.
pub fn rows_independent(
    mut f: impl FnMut(&Tensor) -> Result<Tensor>,
    z: &Tensor,
    trials: usize,
    rng: &mut dyn RngCore,
) -> Result<bool> {
    let base = f(z)?;
    let rows = z.shape()[0];
    for s in 0..rows {
        for _ in 0..trials {
            let mut zp = z.clone();
            for v in zp.row_mut(s) {
                *v += rng.random_range(-1.0..1.0);
            }
            let out = f(&zp)?;
            for r in (0..rows).filter(|&r| r != s) {
                if out.row(r) != base.row(r) {
                    return Ok(false);
                }
            }
        }
    }
    Ok(true)
}

/// Time-independence of an affine projection in a token layout where the
/// rows of `z[L', D]` index time steps (or patches).
pub fn prop2_time_independence_check(
    params: &ParamSet,
    proj: &LinearParams,
    z: &Tensor,
    rng: &mut dyn RngCore,
) -> Result<bool> {
    rows_independent(|zz| project(params, proj, zz), z, 1, rng)
}

/// Largest change in output row `r` when row `s` of `z` is perturbed.
pub fn cross_row_sensitivity(
    mut f: impl FnMut(&Tensor) -> Result<Tensor>,
    z: &Tensor,
    r: usize,
    s: usize,
    delta: &[f64],
) -> Result<f64> {
    let base = f(z)?;
    let mut zp = z.clone();
    for (v, d) in zp.row_mut(s).iter_mut().zip(delta) {
        *v += d;
    }
    let out = f(&zp)?;
    Ok(out
        .row(r)
        .iter()
        .zip(base.row(r))
        .map(|(a, b)| libm::fabs(a - b))
        .fold(0.0, f64::max))
}

/// Describes the model for logs and resolved configs.
pub fn describe(cfg: &ModelConfig) -> String {
    format!(
        "attention={} N={} L={} H={} D={} M={} k={} c_hid={} ffn={} revin={}",
        cfg.attention.as_str(),
        cfg.n_vars,
        cfg.input_len,
        cfg.horizon,
        cfg.d_model,
        cfg.n_blocks,
        cfg.kernel_size,
        cfg.score_hidden,
        cfg.ffn_dim,
        cfg.use_revin
    )
}
