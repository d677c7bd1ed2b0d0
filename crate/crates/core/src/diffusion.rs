//! Denoising diffusion: noise schedule, forward noising, posterior, the
//! ε-prediction objective and the ancestral reverse sampler.

use std::fmt;
use std::str::FromStr;

use crate::error::{bail, Error, Result};
use crate::graph::{Graph, Var};
use crate::params::{ParamId, ParamStore};
use crate::rng::{self, Rng};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Width of the sinusoidal diffusion-step embedding.
pub const STEP_EMBED_DIM: usize = 64;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum LossNorm {
    #[default]
    L1,
    L2,
}

impl fmt::Display for LossNorm {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            LossNorm::L1 => "l1",
            LossNorm::L2 => "l2",
        })
    }
}

impl FromStr for LossNorm {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "l1" => Ok(LossNorm::L1),
            "l2" => Ok(LossNorm::L2),
            _ => bail!(Validation, "unknown loss norm {s:?} (expected l1 or l2)"),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DiffusionConfig {
    pub steps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
    pub loss_norm: LossNorm,
    /// Uses 1/√ᾱ_n instead of 1/√α_n as the reverse-step prefactor.
    pub paper_literal_sampler: bool,
    pub hidden: usize,
}

impl Default for DiffusionConfig {
    fn default() -> Self {
        Self {
            steps: 100,
            beta_start: 1e-4,
            beta_end: 0.1,
            loss_norm: LossNorm::L1,
            paper_literal_sampler: false,
            hidden: 128,
        }
    }
}

impl DiffusionConfig {
    pub fn schedule<T: Scalar>(&self) -> Result<NoiseSchedule<T>> {
        NoiseSchedule::linear(self.steps, self.beta_start, self.beta_end)
    }
}

/// Constants of the forward chain. Arrays are indexed by step `n` in `1..=N`;
/// `alpha_bar[0] = 1`.
#[derive(Clone, Debug, PartialEq)]
pub struct NoiseSchedule<T> {
    beta: Vec<T>,
    alpha: Vec<T>,
    alpha_bar: Vec<T>,
    beta_tilde: Vec<T>,
}

/// Posterior variance β̃_n = (1−ᾱ_{n−1})/(1−ᾱ_n)·β_n.
pub fn posterior_variance<T: Scalar>(beta: T, alpha_bar_prev: T, alpha_bar: T) -> T {
    (T::one() - alpha_bar_prev) / (T::one() - alpha_bar) * beta
}

impl<T: Scalar> NoiseSchedule<T> {
    /// β_n linearly spaced from `beta_start` to `beta_end`.
    pub fn linear(steps: usize, beta_start: f64, beta_end: f64) -> Result<Self> {
        if steps == 0 {
            bail!(Parameter, "diffusion needs at least one step");
        }
        if steps == 1 {
            if !(beta_start > 0.0 && beta_start < 1.0) {
                bail!(Parameter, "beta_start {beta_start} outside (0, 1)");
            }
            return Self::from_betas(vec![T::lit(beta_start)]);
        }
        if !(0.0 < beta_start && beta_start < beta_end && beta_end < 1.0) {
            bail!(Parameter, "need 0 < beta_start < beta_end < 1, got {beta_start}, {beta_end}");
        }
        let span = beta_end - beta_start;
        let betas = (0..steps)
            .map(|i| T::lit(beta_start + span * i as f64 / (steps - 1) as f64))
            .collect();
        Self::from_betas(betas)
    }

    /// Builds from explicit β_1..β_N, which must be strictly increasing in (0, 1).
    pub fn from_betas(beta: Vec<T>) -> Result<Self> {
        if beta.is_empty() {
            bail!(Parameter, "diffusion needs at least one step");
        }
        if let Some(b) = beta.iter().find(|b| !(**b > T::zero() && **b < T::one())) {
            bail!(Parameter, "beta {b} outside (0, 1)");
        }
        if let Some(w) = beta.windows(2).find(|w| w[1] <= w[0]) {
            bail!(Parameter, "betas must be strictly increasing, got {} then {}", w[0], w[1]);
        }
        let alpha: Vec<T> = beta.iter().map(|&b| T::one() - b).collect();
        let mut alpha_bar = Vec::with_capacity(beta.len() + 1);
        alpha_bar.push(T::one());
        for &a in &alpha {
            let prev = *alpha_bar.last().expect("seeded with 1");
            alpha_bar.push(prev * a);
        }
        let beta_tilde = (0..beta.len())
            .map(|i| posterior_variance(beta[i], alpha_bar[i], alpha_bar[i + 1]))
            .collect();
        Ok(Self { beta, alpha, alpha_bar, beta_tilde })
    }

    pub fn steps(&self) -> usize {
        self.beta.len()
    }

    fn check(&self, n: usize) -> Result<()> {
        if n == 0 || n > self.steps() {
            bail!(Parameter, "diffusion step {n} outside 1..={}", self.steps());
        }
        Ok(())
    }

    pub fn beta(&self, n: usize) -> T {
        self.beta[n - 1]
    }

    pub fn alpha(&self, n: usize) -> T {
        self.alpha[n - 1]
    }

    /// ᾱ_n, with ᾱ_0 = 1.
    pub fn alpha_bar(&self, n: usize) -> T {
        self.alpha_bar[n]
    }

    pub fn beta_tilde(&self, n: usize) -> T {
        self.beta_tilde[n - 1]
    }

    pub fn betas(&self) -> &[T] {
        &self.beta
    }
}

/// √ᾱ_n·x0 + √(1−ᾱ_n)·eps, elementwise.
pub fn forward_sample<T: Scalar>(x0: &Tensor<T>, n: usize, eps: &Tensor<T>, sched: &NoiseSchedule<T>) -> Result<Tensor<T>> {
    sched.check(n)?;
    if x0.shape() != eps.shape() {
        bail!(Dimension, "x0 {:?} and eps {:?} differ in shape", x0.shape(), eps.shape());
    }
    let ab = sched.alpha_bar(n);
    let (a, b) = (ab.sqrt(), (T::one() - ab).sqrt());
    let data = x0.data().iter().zip(eps.data()).map(|(&x, &e)| a * x + b * e).collect();
    Tensor::new(x0.shape().to_vec(), data)
}

/// Mean and variance of q(x_{n−1} | x_n, x_0).
pub fn posterior_params<T: Scalar>(
    xn: &Tensor<T>,
    x0: &Tensor<T>,
    n: usize,
    sched: &NoiseSchedule<T>,
) -> Result<(Tensor<T>, T)> {
    sched.check(n)?;
    if xn.shape() != x0.shape() {
        bail!(Dimension, "x_n {:?} and x0 {:?} differ in shape", xn.shape(), x0.shape());
    }
    let (ab, ab_prev, beta) = (sched.alpha_bar(n), sched.alpha_bar(n - 1), sched.beta(n));
    let denom = T::one() - ab;
    let cn = sched.alpha(n).sqrt() * (T::one() - ab_prev) / denom;
    let c0 = ab_prev.sqrt() * beta / denom;
    let data = xn.data().iter().zip(x0.data()).map(|(&a, &b)| cn * a + c0 * b).collect();
    Ok((Tensor::new(xn.shape().to_vec(), data)?, sched.beta_tilde(n)))
}

/// A network predicting the injected noise from `(x_n, h, n)`, one row per sample.
pub trait NoisePredictor<T: Scalar> {
    fn data_dim(&self) -> usize;

    fn cond_dim(&self) -> usize;

    /// `xn: [B×D]`, `h: [B×H]`, `steps.len() == B` → `[B×D]`.
    fn predict(&self, g: &mut Graph<T>, store: &ParamStore<T>, xn: Var, h: Var, steps: &[usize]) -> Result<Var>;
}

/// Sinusoidal embedding of step `n`: `[sin(n·f_0..), cos(n·f_0..)]` with
/// geometric frequencies from 1 down to 1/10000.
pub fn step_embedding<T: Scalar>(n: usize) -> Vec<T> {
    let half = STEP_EMBED_DIM / 2;
    let mut out = vec![T::zero(); STEP_EMBED_DIM];
    for i in 0..half {
        let freq = (-(10000f64.ln()) * i as f64 / (half - 1) as f64).exp();
        let angle = n as f64 * freq;
        out[i] = T::lit(angle.sin());
        out[half + i] = T::lit(angle.cos());
    }
    out
}

/// MLP on `[x_n, h, embed(n)]` with two ELU hidden layers and a linear output.
#[derive(Clone, Debug)]
pub struct EpsilonNet {
    data_dim: usize,
    cond_dim: usize,
    hidden: usize,
    layers: [(ParamId, ParamId); 3],
}

impl EpsilonNet {
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        prefix: &str,
        data_dim: usize,
        cond_dim: usize,
        hidden: usize,
        rng: &mut Rng,
    ) -> Result<Self> {
        if data_dim == 0 || hidden == 0 {
            bail!(Parameter, "epsilon net needs positive data and hidden widths");
        }
        let input = data_dim + cond_dim + STEP_EMBED_DIM;
        let dims = [(input, hidden), (hidden, hidden), (hidden, data_dim)];
        let mut ids = Vec::with_capacity(3);
        for (k, (i, o)) in dims.into_iter().enumerate() {
            let w = store.add_weight(format!("{prefix}l{k}.w"), &[i, o], i, rng);
            let b = store.add_zeros(format!("{prefix}l{k}.b"), &[o]);
            ids.push((w, b));
        }
        Ok(Self { data_dim, cond_dim, hidden, layers: [ids[0], ids[1], ids[2]] })
    }

    pub fn hidden(&self) -> usize {
        self.hidden
    }
}

impl<T: Scalar> NoisePredictor<T> for EpsilonNet {
    fn data_dim(&self) -> usize {
        self.data_dim
    }

    fn cond_dim(&self) -> usize {
        self.cond_dim
    }

    fn predict(&self, g: &mut Graph<T>, store: &ParamStore<T>, xn: Var, h: Var, steps: &[usize]) -> Result<Var> {
        let rows = g.shape(xn)[0];
        if g.shape(xn) != [rows, self.data_dim] || steps.len() != rows {
            bail!(Contract, "epsilon net expects [{rows}×{}] input with {rows} steps", self.data_dim);
        }
        if g.shape(h) != [rows, self.cond_dim] {
            bail!(Contract, "epsilon net conditioning {:?} is not [{rows}×{}]", g.shape(h), self.cond_dim);
        }
        let embed: Vec<T> = steps.iter().flat_map(|&n| step_embedding::<T>(n)).collect();
        let embed = g.constant(Tensor::new(vec![rows, STEP_EMBED_DIM], embed)?);
        let mut x = g.concat_cols(&[xn, h, embed])?;
        for (k, &(w, b)) in self.layers.iter().enumerate() {
            let (wv, bv) = (g.param(store, w), g.param(store, b));
            let z = g.matmul(x, wv)?;
            x = g.add_row(z, bv)?;
            if k < 2 {
                x = g.elu(x);
            }
        }
        Ok(x)
    }
}

/// Noised inputs for a batch: `x_n` rows, the injected noise and the drawn steps.
pub struct NoisedBatch<T> {
    pub xn: Tensor<T>,
    pub eps: Tensor<T>,
    pub steps: Vec<usize>,
}

/// Draws n ~ U{1..N} per row and ε ~ N(0, I), and noises `x0` accordingly.
pub fn noise_batch<T: Scalar>(x0: &Tensor<T>, sched: &NoiseSchedule<T>, rng: &mut Rng) -> Result<NoisedBatch<T>> {
    let rows = x0.rows();
    let steps: Vec<usize> = (0..rows).map(|_| rng::index(rng, 1, sched.steps())).collect();
    let eps = rng::normal_tensor::<T>(rng, x0.shape());
    let mut xn = x0.clone();
    let cols = x0.cols();
    for (r, &n) in steps.iter().enumerate() {
        let ab = sched.alpha_bar(n);
        let (a, b) = (ab.sqrt(), (T::one() - ab).sqrt());
        for c in 0..cols {
            let i = r * cols + c;
            xn.data_mut()[i] = a * x0.data()[i] + b * eps.data()[i];
        }
    }
    Ok(NoisedBatch { xn, eps, steps })
}

/// Row-averaged ‖ε − ε_θ(x_n, h, n)‖ for a pre-drawn noised batch.
pub fn ddpm_loss_given<T: Scalar, P: NoisePredictor<T> + ?Sized>(
    g: &mut Graph<T>,
    store: &ParamStore<T>,
    net: &P,
    batch: &NoisedBatch<T>,
    h: Var,
    norm: LossNorm,
) -> Result<Var> {
    if batch.xn.ndim() != 2 || batch.xn.cols() != net.data_dim() {
        bail!(Contract, "data {:?} does not match network width {}", batch.xn.shape(), net.data_dim());
    }
    let xn = g.constant(batch.xn.clone());
    let pred = net.predict(g, store, xn, h, &batch.steps)?;
    let eps = g.constant(batch.eps.clone());
    let diff = g.sub(eps, pred)?;
    let per = match norm {
        LossNorm::L1 => g.abs(diff),
        LossNorm::L2 => g.square(diff)?,
    };
    let total = g.sum(per);
    Ok(g.scale(total, T::one() / T::lit(batch.xn.rows() as f64)))
}

/// ε-prediction loss on data rows `x0: [B×D]` conditioned on `h: [B×H]`.
pub fn ddpm_loss<T: Scalar, P: NoisePredictor<T> + ?Sized>(
    g: &mut Graph<T>,
    store: &ParamStore<T>,
    net: &P,
    sched: &NoiseSchedule<T>,
    x0: &Tensor<T>,
    h: Var,
    rng: &mut Rng,
    norm: LossNorm,
) -> Result<Var> {
    if x0.ndim() != 2 || x0.cols() != net.data_dim() {
        bail!(Contract, "data {:?} does not match network width {}", x0.shape(), net.data_dim());
    }
    let batch = noise_batch(x0, sched, rng)?;
    ddpm_loss_given(g, store, net, &batch, h, norm)
}

/// Reverse sampler bound to a network, its parameters and a schedule.
pub struct Sampler<'a, T: Scalar, P: ?Sized> {
    pub net: &'a P,
    pub store: &'a ParamStore<T>,
    pub sched: &'a NoiseSchedule<T>,
    pub paper_literal: bool,
}

impl<'a, T: Scalar, P: NoisePredictor<T> + ?Sized> Sampler<'a, T, P> {
    pub fn new(net: &'a P, store: &'a ParamStore<T>, sched: &'a NoiseSchedule<T>) -> Self {
        Self { net, store, sched, paper_literal: false }
    }

    pub fn paper_literal(mut self, on: bool) -> Self {
        self.paper_literal = on;
        self
    }

    fn predict(&self, xn: &Tensor<T>, h: &Tensor<T>, n: usize) -> Result<Tensor<T>> {
        let mut g = Graph::new();
        let xv = g.constant(xn.clone());
        let hv = g.constant(h.clone());
        let out = self.net.predict(&mut g, self.store, xv, hv, &vec![n; xn.rows()])?;
        Ok(g.value(out).clone())
    }

    /// One ancestral step x_n → x_{n−1}; `z` is ignored at n = 1.
    pub fn reverse_step(&self, xn: &Tensor<T>, h: &Tensor<T>, n: usize, z: &Tensor<T>) -> Result<Tensor<T>> {
        self.sched.check(n)?;
        if z.shape() != xn.shape() {
            bail!(Dimension, "noise {:?} does not match x_n {:?}", z.shape(), xn.shape());
        }
        let eps = self.predict(xn, h, n)?;
        let s = self.sched;
        let pre = if self.paper_literal { s.alpha_bar(n) } else { s.alpha(n) };
        let pre = T::one() / pre.sqrt();
        let coef = s.beta(n) / (T::one() - s.alpha_bar(n)).sqrt();
        let sigma = if n > 1 { s.beta_tilde(n).sqrt() } else { T::zero() };
        let data = xn
            .data()
            .iter()
            .zip(eps.data())
            .zip(z.data())
            .map(|((&x, &e), &zz)| pre * (x - coef * e) + sigma * zz)
            .collect();
        Tensor::new(xn.shape().to_vec(), data)
    }

    /// Runs n = N..1 from `x_init`, drawing z for row `r` from `streams[r]`.
    pub fn sample_streams(&self, x_init: Tensor<T>, h: &Tensor<T>, streams: &mut [Rng]) -> Result<Tensor<T>> {
        if streams.len() != x_init.rows() {
            bail!(Contract, "{} noise streams for {} rows", streams.len(), x_init.rows());
        }
        let cols = x_init.cols();
        let mut x = x_init;
        for n in (1..=self.sched.steps()).rev() {
            let z = if n > 1 {
                let data = streams.iter_mut().flat_map(|r| (0..cols).map(|_| rng::normal::<T>(r)).collect::<Vec<_>>()).collect();
                Tensor::new(x.shape().to_vec(), data)?
            } else {
                Tensor::zeros(x.shape())
            };
            x = self.reverse_step(&x, h, n, &z)?;
            if !x.is_finite() {
                bail!(NonFinite, "reverse sampler diverged at step {n}");
            }
        }
        Ok(x)
    }

    /// Draws x_N ~ N(0, I) and runs the full reverse chain.
    pub fn sample(&self, h: &Tensor<T>, rng: &mut Rng) -> Result<Tensor<T>> {
        let x_init = rng::normal_tensor(rng, &[h.rows(), self.net.data_dim()]);
        self.sample_from(x_init, h, rng)
    }

    /// Runs the reverse chain from a caller-supplied `x_init`, with z from one stream.
    pub fn sample_from(&self, x_init: Tensor<T>, h: &Tensor<T>, rng: &mut Rng) -> Result<Tensor<T>> {
        let shape = x_init.shape().to_vec();
        let mut x = x_init;
        for n in (1..=self.sched.steps()).rev() {
            let z = if n > 1 { rng::normal_tensor(rng, &shape) } else { Tensor::zeros(&shape) };
            x = self.reverse_step(&x, h, n, &z)?;
            if !x.is_finite() {
                bail!(NonFinite, "reverse sampler diverged at step {n}");
            }
        }
        Ok(x)
    }
}
