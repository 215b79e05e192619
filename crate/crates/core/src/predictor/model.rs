use std::sync::Arc;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{Activation, Binding, ElmanCell, Graph, GruCell, LstmCell, Mlp, ParamVector, SegmentLayout, Tensor, Var};
use crate::scalar::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum CellKind {
    #[default]
    Gru,
    Elman,
    Lstm,
}

/// What the recurrent cell consumes each slot.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum GruInput {
    #[default]
    Reconstruction,
    Latent,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PredictorConfig {
    pub catalog: usize,
    pub locations: usize,
    pub time_buckets: usize,
    pub loc_embed: usize,
    pub time_embed: usize,
    pub context_dim: usize,
    pub enc_hidden: usize,
    pub latent: usize,
    pub dec_hidden: usize,
    pub rnn_hidden: usize,
    pub cell: CellKind,
    pub gru_input: GruInput,
    pub lambda: f64,
    pub beta_kl: f64,
    pub kl_warmup_epochs: usize,
}

impl Default for PredictorConfig {
    fn default() -> Self {
        Self {
            catalog: 500,
            locations: 9,
            time_buckets: 24,
            loc_embed: 4,
            time_embed: 4,
            context_dim: 1,
            enc_hidden: 32,
            latent: 8,
            dec_hidden: 32,
            rnn_hidden: 32,
            cell: CellKind::Gru,
            gru_input: GruInput::Reconstruction,
            lambda: 0.5,
            beta_kl: 1.0,
            kl_warmup_epochs: 10,
        }
    }
}

impl PredictorConfig {
    pub fn validate(&self) -> Result<()> {
        if self.catalog == 0 || self.latent == 0 || self.rnn_hidden == 0 {
            return Err(Error::Config("predictor dimensions must be positive".into()));
        }
        if self.locations == 0 || self.time_buckets == 0 {
            return Err(Error::Config("embedding tables need at least one row".into()));
        }
        if !(0.0..=1.0).contains(&self.lambda) {
            return Err(Error::Config(format!("lambda {} outside [0,1]", self.lambda)));
        }
        if self.beta_kl < 0.0 {
            return Err(Error::Config("beta_kl must be >= 0".into()));
        }
        Ok(())
    }

    pub fn input_dim(&self) -> usize {
        self.catalog + self.loc_embed + self.time_embed + self.context_dim
    }
}

/// One slot of observations for one location.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureFrame {
    pub requests: Vec<f64>,
    pub location: usize,
    pub time_bucket: usize,
    pub context: Vec<f64>,
}

impl FeatureFrame {
    /// Normalizes raw per-item counts by the slot total (all zeros stay zero).
    pub fn from_counts(counts: &[f64], location: usize, time_bucket: usize, context: Vec<f64>) -> Self {
        let total: f64 = counts.iter().sum();
        let requests = if total > 0.0 {
            counts.iter().map(|c| c / total).collect()
        } else {
            vec![0.0; counts.len()]
        };
        Self {
            requests,
            location,
            time_bucket,
            context,
        }
    }
}

/// A frame window and the next-slot request distribution it should predict.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Sample {
    pub frames: Vec<FeatureFrame>,
    pub target: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PopularityForecast<T> {
    pub probs: Vec<T>,
    pub slot: u64,
}

impl<T: Scalar> PopularityForecast<T> {
    /// Content ids ordered by decreasing probability (ties by id).
    pub fn ranking(&self) -> Vec<usize> {
        let mut idx: Vec<usize> = (0..self.probs.len()).collect();
        idx.sort_by(|&a, &b| {
            self.probs[b]
                .partial_cmp(&self.probs[a])
                .unwrap_or(std::cmp::Ordering::Equal)
                .then(a.cmp(&b))
        });
        idx
    }

    pub fn argmax(&self) -> usize {
        self.ranking()[0]
    }
}

/// Source of the reparameterization noise ε.
pub enum Noise<'a, R: Rng> {
    Zero,
    Sampled(&'a mut R),
}

impl Noise<'static, rand_chacha::ChaCha8Rng> {
    /// Deterministic ε = 0, used for inference.
    pub fn zero() -> Self {
        Noise::Zero
    }
}

impl<R: Rng> Noise<'_, R> {
    fn draw<T: Scalar>(&mut self, n: usize) -> Vec<T> {
        match self {
            Noise::Zero => vec![T::zero(); n],
            Noise::Sampled(rng) => (0..n)
                .map(|_| {
                    let v: f64 = StandardNormal.sample(*rng);
                    T::lit(v)
                })
                .collect(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossParts<T> {
    pub total: T,
    pub vae: T,
    pub gru: T,
}

/// Graph handles produced by one batched forward pass.
pub(crate) struct ForwardVars {
    pub total: Var,
    pub vae: Var,
    pub gru: Var,
    pub sigmas: Vec<Var>,
}

enum Cell {
    Gru(GruCell),
    Elman(ElmanCell),
    Lstm(LstmCell),
}

/// Architecture of the predictor. Parameters live in a separate [`ParamVector`].
pub struct GruVae {
    cfg: PredictorConfig,
    layout: Arc<SegmentLayout>,
    encoder: Mlp,
    mu_head: Mlp,
    sigma_head: Mlp,
    decoder: Mlp,
    cell: Cell,
}

pub(crate) const EMB_LOC: &str = "emb.loc";
pub(crate) const EMB_TIME: &str = "emb.time";
const HEAD_W: &str = "head.w";
const HEAD_B: &str = "head.b";

impl GruVae {
    pub fn new(cfg: PredictorConfig) -> Result<Self> {
        cfg.validate()?;
        let encoder = Mlp::new("enc", &[cfg.input_dim(), cfg.enc_hidden]);
        let mu_head = Mlp::new("enc_mu", &[cfg.enc_hidden, cfg.latent]);
        let sigma_head = Mlp::new("enc_sigma", &[cfg.enc_hidden, cfg.latent]);
        let decoder = Mlp::new("dec", &[cfg.latent, cfg.dec_hidden, cfg.catalog]);
        let rnn_in = match cfg.gru_input {
            GruInput::Reconstruction => cfg.catalog,
            GruInput::Latent => cfg.latent,
        };
        let cell = match cfg.cell {
            CellKind::Gru => Cell::Gru(GruCell::new("rnn", rnn_in, cfg.rnn_hidden)),
            CellKind::Elman => Cell::Elman(ElmanCell::new("rnn", rnn_in, cfg.rnn_hidden)),
            CellKind::Lstm => Cell::Lstm(LstmCell::new("rnn", rnn_in, cfg.rnn_hidden)),
        };
        let mut b = SegmentLayout::builder()
            .push(EMB_LOC, &[cfg.locations, cfg.loc_embed])
            .push(EMB_TIME, &[cfg.time_buckets, cfg.time_embed]);
        b = encoder.declare(b);
        b = mu_head.declare(b);
        b = sigma_head.declare(b);
        b = decoder.declare(b);
        b = match &cell {
            Cell::Gru(c) => c.declare(b),
            Cell::Elman(c) => c.declare(b),
            Cell::Lstm(c) => c.declare(b),
        };
        b = b
            .push(HEAD_W, &[cfg.catalog, cfg.rnn_hidden])
            .push(HEAD_B, &[cfg.catalog]);
        Ok(Self {
            layout: b.build()?,
            cfg,
            encoder,
            mu_head,
            sigma_head,
            decoder,
            cell,
        })
    }

    pub fn config(&self) -> &PredictorConfig {
        &self.cfg
    }

    pub fn layout(&self) -> &Arc<SegmentLayout> {
        &self.layout
    }

    pub fn init_params<T: Scalar>(&self, rng: &mut impl Rng) -> ParamVector<T> {
        ParamVector::glorot(self.layout.clone(), rng)
    }

    pub fn zero_params<T: Scalar>(&self) -> ParamVector<T> {
        ParamVector::zeros(self.layout.clone())
    }

    /// Segments belonging to the VAE side (embeddings, encoder, decoder).
    pub fn is_vae_segment(name: &str) -> bool {
        name.starts_with("emb.") || name.starts_with("enc") || name.starts_with("dec.")
    }

    fn check_params<T: Scalar>(&self, p: &ParamVector<T>) -> Result<()> {
        if **p.layout() != *self.layout {
            return Err(Error::Layout("parameters do not match predictor layout".into()));
        }
        Ok(())
    }

    pub fn validate_frame(&self, f: &FeatureFrame) -> Result<()> {
        let c = &self.cfg;
        if f.requests.len() != c.catalog {
            return Err(Error::shape(
                "build_input",
                format!("{} request entries for catalog {}", f.requests.len(), c.catalog),
            ));
        }
        if f.context.len() != c.context_dim {
            return Err(Error::shape(
                "build_input",
                format!("context dim {} != {}", f.context.len(), c.context_dim),
            ));
        }
        if f.location >= c.locations || f.time_bucket >= c.time_buckets {
            return Err(Error::invalid(format!(
                "embedding index out of bounds: location {} / {}, time {} / {}",
                f.location, c.locations, f.time_bucket, c.time_buckets
            )));
        }
        if f.requests.iter().any(|&v| !(v >= 0.0)) {
            return Err(Error::invalid("request features must be >= 0"));
        }
        Ok(())
    }

    /// `[x_t, E_loc[I_t], E_time[t], c_t]` for a batch of frames taken at the same step.
    pub(crate) fn input_graph<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        b: Binding,
        frames: &[&FeatureFrame],
    ) -> Result<(Var, Var)> {
        for f in frames {
            self.validate_frame(f)?;
        }
        let rows = frames.len();
        let batched = rows > 1;
        let to_t = |v: &[f64]| v.iter().map(|&x| T::lit(x)).collect::<Vec<T>>();
        let xs: Vec<T> = frames.iter().flat_map(|f| to_t(&f.requests)).collect();
        let cs: Vec<T> = frames.iter().flat_map(|f| to_t(&f.context)).collect();
        let shape = |w: usize| if batched { vec![rows, w] } else { vec![w] };
        let x = g.input(Tensor::new(shape(self.cfg.catalog), xs)?)?;
        let c = g.input(Tensor::new(shape(self.cfg.context_dim), cs)?)?;
        let loc_t = g.param(b, EMB_LOC)?;
        let time_t = g.param(b, EMB_TIME)?;
        let li: Vec<usize> = frames.iter().map(|f| f.location).collect();
        let ti: Vec<usize> = frames.iter().map(|f| f.time_bucket).collect();
        let le = g.gather_rows(loc_t, &li)?;
        let te = g.gather_rows(time_t, &ti)?;
        let mut parts = vec![x, le, te];
        if self.cfg.context_dim > 0 {
            parts.push(c);
        }
        let h = g.concat(&parts)?;
        Ok((x, h))
    }

    pub(crate) fn encode_graph<T: Scalar>(&self, g: &mut Graph<T>, b: Binding, h: Var) -> Result<(Var, Var)> {
        let hid = self.encoder.forward(g, b, h, Activation::Tanh, Activation::Tanh)?;
        let mu = self.mu_head.forward(g, b, hid, Activation::Identity, Activation::Identity)?;
        let sigma = self.sigma_head.forward(g, b, hid, Activation::Identity, Activation::Softplus)?;
        Ok((mu, sigma))
    }

    pub(crate) fn decode_graph<T: Scalar>(&self, g: &mut Graph<T>, b: Binding, z: Var) -> Result<Var> {
        self.decoder.forward(g, b, z, Activation::Tanh, Activation::Identity)
    }

    fn head_graph<T: Scalar>(&self, g: &mut Graph<T>, b: Binding, h: Var) -> Result<Var> {
        let w = g.param(b, HEAD_W)?;
        let bo = g.param(b, HEAD_B)?;
        let logits = g.affine(h, w, bo)?;
        g.softmax(logits)
    }

    /// Runs the per-slot VAE and recurrence over `batch` (all sequences the
    /// same length). Returns the forecast node and per-step VAE terms.
    pub(crate) fn rollout<T: Scalar, R: Rng>(
        &self,
        g: &mut Graph<T>,
        b: Binding,
        batch: &[&[FeatureFrame]],
        noise: &mut Noise<'_, R>,
        beta: T,
    ) -> Result<(Var, Vec<Var>, Vec<Var>)> {
        let steps = batch.first().map(|s| s.len()).unwrap_or(0);
        if steps == 0 {
            return Err(Error::Empty("frame sequence"));
        }
        if batch.iter().any(|s| s.len() != steps) {
            return Err(Error::invalid("sequences in a batch must share a length"));
        }
        let rows = batch.len();
        let hshape = if rows > 1 {
            vec![rows, self.cfg.rnn_hidden]
        } else {
            vec![self.cfg.rnn_hidden]
        };
        let mut h = g.input(Tensor::zeros(&hshape))?;
        let mut c = h;
        let mut vae_terms = Vec::with_capacity(steps);
        let mut sigmas = Vec::with_capacity(steps);
        let inv_rows = T::one() / T::lit(rows as f64);
        for t in 0..steps {
            let frames: Vec<&FeatureFrame> = batch.iter().map(|s| &s[t]).collect();
            let (x, hin) = self.input_graph(g, b, &frames)?;
            let (mu, sigma) = self.encode_graph(g, b, hin)?;
            let eps_shape = g.value(mu).shape().to_vec();
            let eps = g.input(Tensor::new(eps_shape, noise.draw(rows * self.cfg.latent))?)?;
            let se = g.mul(sigma, eps)?;
            let z = g.add(mu, se)?;
            let xhat = self.decode_graph(g, b, z)?;
            let rec = g.mse(x, xhat)?;
            let kl = g.kl_gauss(mu, sigma)?;
            let kl = g.scale(kl, beta * inv_rows)?;
            vae_terms.push(g.add(rec, kl)?);
            sigmas.push(sigma);
            let rin = match self.cfg.gru_input {
                GruInput::Reconstruction => xhat,
                GruInput::Latent => z,
            };
            match &self.cell {
                Cell::Gru(cell) => h = cell.step(g, b, h, rin)?,
                Cell::Elman(cell) => h = cell.step(g, b, h, rin)?,
                Cell::Lstm(cell) => {
                    let (hn, cn) = cell.step(g, b, h, c, rin)?;
                    h = hn;
                    c = cn;
                }
            }
        }
        let yhat = self.head_graph(g, b, h)?;
        Ok((yhat, vae_terms, sigmas))
    }

    /// Builds `λ·L_VAE + (1−λ)·L_GRU` for a batch of same-length samples.
    pub(crate) fn loss_graph<T: Scalar, R: Rng>(
        &self,
        g: &mut Graph<T>,
        b: Binding,
        batch: &[&Sample],
        noise: &mut Noise<'_, R>,
        beta: T,
        lambda: T,
    ) -> Result<ForwardVars> {
        if batch.is_empty() {
            return Err(Error::Empty("batch"));
        }
        if !(lambda >= T::zero() && lambda <= T::one()) {
            return Err(Error::invalid(format!("lambda {lambda} outside [0,1]")));
        }
        let seqs: Vec<&[FeatureFrame]> = batch.iter().map(|s| s.frames.as_slice()).collect();
        let (yhat, vae_terms, sigmas) = self.rollout(g, b, &seqs, noise, beta)?;
        let rows = batch.len();
        let mut ys = Vec::with_capacity(rows * self.cfg.catalog);
        for s in batch {
            if s.target.len() != self.cfg.catalog {
                return Err(Error::shape("joint_loss", "target length != catalog"));
            }
            ys.extend(s.target.iter().map(|&v| T::lit(v)));
        }
        let yshape = g.value(yhat).shape().to_vec();
        let y = g.input(Tensor::new(yshape, ys)?)?;
        let gru = g.mse(y, yhat)?;
        let mut vae = vae_terms[0];
        for &v in &vae_terms[1..] {
            vae = g.add(vae, v)?;
        }
        let vae = g.scale(vae, T::one() / T::lit(vae_terms.len() as f64))?;
        let a = g.scale(vae, lambda)?;
        let c = g.scale(gru, T::one() - lambda)?;
        let total = g.add(a, c)?;
        Ok(ForwardVars {
            total,
            vae,
            gru,
            sigmas,
        })
    }

    pub fn build_input<T: Scalar>(&self, frame: &FeatureFrame, p: &ParamVector<T>) -> Result<Tensor<T>> {
        self.check_params(p)?;
        let mut g = Graph::new();
        let b = g.bind(p);
        let (_, h) = self.input_graph(&mut g, b, &[frame])?;
        Ok(g.value(h).clone())
    }

    pub fn vae_encode<T: Scalar>(&self, h: &Tensor<T>, p: &ParamVector<T>) -> Result<(Tensor<T>, Tensor<T>)> {
        self.check_params(p)?;
        if h.last_dim() != self.cfg.input_dim() {
            return Err(Error::shape("vae_encode", format!("input width {}", h.last_dim())));
        }
        let mut g = Graph::new();
        let b = g.bind(p);
        let hv = g.input(h.clone())?;
        let (mu, sigma) = self.encode_graph(&mut g, b, hv)?;
        Ok((g.value(mu).clone(), g.value(sigma).clone()))
    }

    pub fn vae_decode<T: Scalar>(&self, z: &Tensor<T>, p: &ParamVector<T>) -> Result<Tensor<T>> {
        self.check_params(p)?;
        if z.last_dim() != self.cfg.latent {
            return Err(Error::shape("vae_decode", format!("latent width {}", z.last_dim())));
        }
        let mut g = Graph::new();
        let b = g.bind(p);
        let zv = g.input(z.clone())?;
        let x = self.decode_graph(&mut g, b, zv)?;
        Ok(g.value(x).clone())
    }

    /// Forecast for the slot after `frames`, with `h_0 = 0`.
    pub fn predict_popularity<T: Scalar, R: Rng>(
        &self,
        frames: &[FeatureFrame],
        p: &ParamVector<T>,
        noise: &mut Noise<'_, R>,
        slot: u64,
    ) -> Result<PopularityForecast<T>> {
        self.check_params(p)?;
        let mut g = Graph::new();
        let b = g.bind(p);
        let (yhat, _, _) = self.rollout(&mut g, b, &[frames], noise, T::zero())?;
        Ok(PopularityForecast {
            probs: g.value(yhat).data().to_vec(),
            slot,
        })
    }

    /// Batch-mean joint loss and its parts.
    pub fn joint_loss<T: Scalar, R: Rng>(
        &self,
        batch: &[&Sample],
        p: &ParamVector<T>,
        noise: &mut Noise<'_, R>,
        lambda: T,
        beta: T,
    ) -> Result<LossParts<T>> {
        self.check_params(p)?;
        let mut g = Graph::new();
        let b = g.bind(p);
        let f = self.loss_graph(&mut g, b, batch, noise, beta, lambda)?;
        Ok(LossParts {
            total: g.value(f.total).item()?,
            vae: g.value(f.vae).item()?,
            gru: g.value(f.gru).item()?,
        })
    }

    /// Joint loss plus its gradient accumulated into `p.grads` (scaled by `weight`).
    pub fn accumulate_gradient<T: Scalar, R: Rng>(
        &self,
        batch: &[&Sample],
        p: &mut ParamVector<T>,
        noise: &mut Noise<'_, R>,
        lambda: T,
        beta: T,
        weight: T,
    ) -> Result<(LossParts<T>, T)> {
        self.check_params(p)?;
        let mut g = Graph::new();
        let b = g.bind(p);
        let f = self.loss_graph(&mut g, b, batch, noise, beta, lambda)?;
        let scaled = g.scale(f.total, weight)?;
        let grads = g.backward(scaled)?;
        grads.accumulate_into(b, p)?;
        let min_sigma = f
            .sigmas
            .iter()
            .flat_map(|&s| g.value(s).data().to_vec())
            .fold(T::infinity(), T::min);
        Ok((
            LossParts {
                total: g.value(f.total).item()?,
                vae: g.value(f.vae).item()?,
                gru: g.value(f.gru).item()?,
            },
            min_sigma,
        ))
    }
}

/// `z = μ + σ ⊙ ε`.
pub fn reparameterize<T: Scalar>(mu: &Tensor<T>, sigma: &Tensor<T>, eps: &Tensor<T>) -> Result<Tensor<T>> {
    if mu.shape() != sigma.shape() || mu.shape() != eps.shape() {
        return Err(Error::shape("reparameterize", "μ, σ, ε shapes differ"));
    }
    let data = mu
        .data()
        .iter()
        .zip(sigma.data())
        .zip(eps.data())
        .map(|((&m, &s), &e)| m + s * e)
        .collect();
    Tensor::new(mu.shape().to_vec(), data)
}

/// `mse(x, x̂) + β·KL(N(μ,σ²) ‖ N(0,1))`.
pub fn vae_loss<T: Scalar>(
    x: &Tensor<T>,
    xhat: &Tensor<T>,
    mu: &Tensor<T>,
    sigma: &Tensor<T>,
    beta: T,
) -> Result<T> {
    Ok(crate::nn::mse(x, xhat)? + beta * crate::nn::kl_gauss(mu, sigma)?)
}
