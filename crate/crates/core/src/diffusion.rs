//! Pixel-space conditional diffusion: linear noise schedule, forward process,
//! noise-prediction loss, deterministic DDIM sampling and stochastic ancestral
//! sampling with per-step trajectory recording.

use ndarray::{Array2, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::checkpoint::{self, ParamBlob};
use crate::error::{Error, Result};
use crate::nn::{self, Block, LayoutBuilder};
use crate::scene;

/// Linear beta schedule with cumulative products. Timesteps are 1-based;
/// `alpha_bar(0)` is 1.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NoiseSchedule {
    pub timesteps: usize,
    pub beta_min: f64,
    pub beta_max: f64,
    betas: Vec<f64>,
    alpha_bars: Vec<f64>,
}

impl NoiseSchedule {
    pub fn linear(timesteps: usize, beta_min: f64, beta_max: f64) -> Result<Self> {
        if timesteps == 0 {
            return Err(Error::InvalidArgument("schedule needs at least one step".into()));
        }
        if !(0.0 < beta_min && beta_min <= beta_max && beta_max < 1.0) {
            return Err(Error::InvalidArgument(format!(
                "betas must satisfy 0 < beta_min <= beta_max < 1, got [{beta_min}, {beta_max}]"
            )));
        }
        let betas: Vec<f64> = (0..timesteps)
            .map(|i| {
                if timesteps == 1 {
                    beta_min
                } else {
                    beta_min + (beta_max - beta_min) * i as f64 / (timesteps - 1) as f64
                }
            })
            .collect();
        let mut alpha_bars = Vec::with_capacity(timesteps);
        let mut acc = 1.0;
        for b in &betas {
            acc *= 1.0 - b;
            alpha_bars.push(acc);
        }
        Ok(NoiseSchedule { timesteps, beta_min, beta_max, betas, alpha_bars })
    }

    pub fn beta(&self, t: usize) -> f64 {
        self.betas[t - 1]
    }

    pub fn alpha(&self, t: usize) -> f64 {
        1.0 - self.betas[t - 1]
    }

    pub fn alpha_bar(&self, t: usize) -> f64 {
        if t == 0 {
            1.0
        } else {
            self.alpha_bars[t - 1]
        }
    }

    pub fn betas(&self) -> &[f64] {
        &self.betas
    }

    pub fn alpha_bars(&self) -> &[f64] {
        &self.alpha_bars
    }

    /// Standard deviation of ancestral step `t` (sigma_t^2 = beta_t).
    pub fn sigma(&self, t: usize) -> f64 {
        self.beta(t).sqrt()
    }

    /// `steps` evenly spaced timesteps from T down to the smallest, strictly decreasing.
    pub fn ddim_timesteps(&self, steps: usize) -> Result<Vec<usize>> {
        if steps == 0 || steps > self.timesteps {
            return Err(Error::InvalidArgument(format!(
                "DDIM steps must be in 1..={}, got {steps}",
                self.timesteps
            )));
        }
        Ok((0..steps)
            .map(|i| ((self.timesteps * (steps - i)) as f64 / steps as f64).round() as usize)
            .collect())
    }
}

/// `z_t = sqrt(abar_t) z0 + sqrt(1 - abar_t) eps`.
pub fn forward_diffuse(z0: &[f64], t: usize, eps: &[f64], schedule: &NoiseSchedule) -> Result<Vec<f64>> {
    if t == 0 || t > schedule.timesteps {
        return Err(Error::InvalidArgument(format!("t must be in 1..={}, got {t}", schedule.timesteps)));
    }
    if eps.len() != z0.len() {
        return Err(Error::InvalidArgument("noise shape differs from z0".into()));
    }
    let ab = schedule.alpha_bar(t);
    let (a, s) = (ab.sqrt(), (1.0 - ab).sqrt());
    Ok(z0.iter().zip(eps).map(|(x, e)| a * x + s * e).collect())
}

/// Anything that predicts the added noise from `(z_t, t, conditioning)`.
pub trait NoisePredictor {
    fn schedule(&self) -> &NoiseSchedule;
    fn sample_dim(&self) -> usize;
    fn predict(&self, z: &[f64], t: usize, cond: &[f64]) -> Vec<f64>;
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DenoiserConfig {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    /// Spatial average-pool factor applied to the input.
    pub pool: usize,
    pub hidden: usize,
    pub cond_dim: usize,
    /// Channels of the full-resolution convolutional refinement.
    pub local_channels: usize,
    /// Odd convolution kernel size.
    pub kernel: usize,
    /// Data scale used by the skip/output preconditioning.
    pub sigma_data: f64,
}

impl Default for DenoiserConfig {
    fn default() -> Self {
        DenoiserConfig {
            height: scene::IMAGE_SIZE,
            width: scene::IMAGE_SIZE,
            channels: scene::CHANNELS,
            pool: 2,
            hidden: 120,
            cond_dim: 32,
            local_channels: 16,
            kernel: 1,
            sigma_data: 0.5,
        }
    }
}

impl DenoiserConfig {
    pub fn sample_dim(&self) -> usize {
        self.height * self.width * self.channels
    }

    fn pooled_len(&self) -> usize {
        (self.height / self.pool) * (self.width / self.pool) * self.channels
    }
}

#[derive(Debug, Clone)]
struct Layout {
    w_in: Block,
    b_in: Block,
    w_cond: Block,
    t_emb: Block,
    w_mid: Block,
    b_mid: Block,
    w_out: Block,
    b_out: Block,
    conv1: Block,
    conv1_b: Block,
    conv_t: Block,
    conv2: Block,
    conv2_b: Block,
    total: usize,
}

impl Layout {
    fn new(cfg: &DenoiserConfig, timesteps: usize) -> Self {
        let mut b = LayoutBuilder::default();
        let h = cfg.hidden;
        let w_in = b.matrix(h, cfg.pooled_len());
        let b_in = b.vector(h);
        let w_cond = b.matrix(h, cfg.cond_dim);
        let t_emb = b.matrix(timesteps, h);
        let w_mid = b.matrix(h, h);
        let b_mid = b.vector(h);
        let w_out = b.matrix(cfg.sample_dim(), h);
        let b_out = b.vector(cfg.sample_dim());
        let kk = cfg.kernel * cfg.kernel;
        let conv1 = b.matrix(cfg.local_channels, kk * 2 * cfg.channels);
        let conv1_b = b.vector(cfg.local_channels);
        let conv_t = b.matrix(timesteps, cfg.local_channels);
        let conv2 = b.matrix(cfg.channels, kk * cfg.local_channels);
        let conv2_b = b.vector(cfg.channels);
        Layout {
            w_in,
            b_in,
            w_cond,
            t_emb,
            w_mid,
            b_mid,
            w_out,
            b_out,
            conv1,
            conv1_b,
            conv_t,
            conv2,
            conv2_b,
            total: b.total(),
        }
    }
}

/// Named subsets of the denoiser's parameters.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum ParamGroup {
    #[default]
    All,
    /// The pooled MLP that produces the coarse estimate.
    Global,
    /// Conditioning projection, timestep embedding and hidden biases.
    Conditioning,
    /// Output layer of the pooled MLP.
    Head,
    /// The convolutional correction.
    Local,
}

/// Conditional noise-prediction network.
///
/// A pooled view of `z_t` plus conditioning and a learned timestep embedding
/// feed a two-layer SiLU MLP (with a residual) that emits a coarse
/// full-resolution estimate `g`. Two convolutions over `[z_t, g]` add a local
/// correction, giving the clean-image estimate `x = g + conv(z_t, g)`. The noise
/// prediction is
/// `eps = A_t z_t - B_t x`, where `A_t`, `B_t` follow from blending the
/// identity and `x` by `sigma_data`; both stay bounded for every `t`.
#[derive(Debug, Clone)]
pub struct Denoiser {
    config: DenoiserConfig,
    schedule: NoiseSchedule,
    layout: Layout,
    params: Vec<f64>,
    skip: Vec<(f64, f64)>,
}

/// Network inputs see `sqrt(abar_t) * z_t`, which fades the pure-noise input
/// out at high noise levels where the estimate should rest on the conditioning.
fn input_scale(schedule: &NoiseSchedule, t: usize) -> f64 {
    schedule.alpha_bar(t).sqrt()
}

/// Forward activations kept for backprop.
pub struct DenoiserCache {
    pooled: Array2<f64>,
    cond: Array2<f64>,
    ts: Vec<usize>,
    pre1: Array2<f64>,
    h1: Array2<f64>,
    pre2: Array2<f64>,
    h2: Array2<f64>,
    cols1: Array2<f64>,
    pre_a: Array2<f64>,
    cols2: Array2<f64>,
}

impl Denoiser {
    pub fn new(config: DenoiserConfig, schedule: NoiseSchedule, seed: u64) -> Result<Self> {
        if config.pool == 0 || config.height % config.pool != 0 || config.width % config.pool != 0 {
            return Err(Error::InvalidArgument("pool factor must divide the image size".into()));
        }
        if config.kernel % 2 == 0 {
            return Err(Error::InvalidArgument("kernel size must be odd".into()));
        }
        let layout = Layout::new(&config, schedule.timesteps);
        let mut params = vec![0.0; layout.total];
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let h = config.hidden as f64;
        nn::init_normal(&mut params, &layout.w_in, 1.0 / (config.pooled_len() as f64).sqrt(), &mut rng);
        nn::init_normal(&mut params, &layout.w_cond, 1.0 / (config.cond_dim as f64).sqrt(), &mut rng);
        nn::init_normal(&mut params, &layout.t_emb, 0.5, &mut rng);
        nn::init_normal(&mut params, &layout.w_mid, 1.0 / h.sqrt(), &mut rng);
        nn::init_normal(&mut params, &layout.w_out, 1.0 / h.sqrt(), &mut rng);
        let kk = (config.kernel * config.kernel) as f64;
        nn::init_normal(&mut params, &layout.conv1, 1.0 / (kk * 2.0 * config.channels as f64).sqrt(), &mut rng);
        nn::init_normal(&mut params, &layout.conv2, 0.1 / (kk * config.local_channels as f64).sqrt(), &mut rng);
        let skip = Self::skip_coefficients(&schedule, config.sigma_data);
        Ok(Denoiser { config, schedule, layout, params, skip })
    }

    fn skip_coefficients(schedule: &NoiseSchedule, sigma_data: f64) -> Vec<(f64, f64)> {
        let sd2 = sigma_data * sigma_data;
        (1..=schedule.timesteps)
            .map(|t| {
                let ab = schedule.alpha_bar(t);
                let denom = (1.0 - ab) + sd2 * ab;
                ((1.0 - ab).sqrt() / denom, (ab * (1.0 - ab)).sqrt() / denom)
            })
            .collect()
    }

    pub fn config(&self) -> &DenoiserConfig {
        &self.config
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    pub fn param_count(&self) -> usize {
        self.params.len()
    }

    pub fn param_ranges(&self, group: ParamGroup) -> Vec<std::ops::Range<usize>> {
        let l = &self.layout;
        let blocks: Vec<&Block> = match group {
            ParamGroup::All => return vec![0..l.total],
            ParamGroup::Global => vec![&l.w_in, &l.b_in, &l.w_cond, &l.t_emb, &l.w_mid, &l.b_mid, &l.w_out, &l.b_out],
            ParamGroup::Conditioning => vec![&l.b_in, &l.w_cond, &l.t_emb, &l.b_mid],
            ParamGroup::Head => vec![&l.w_out, &l.b_out],
            ParamGroup::Local => vec![&l.conv1, &l.conv1_b, &l.conv_t, &l.conv2, &l.conv2_b],
        };
        blocks.into_iter().map(Block::range).collect()
    }

    fn check_batch(&self, zs: &Array2<f64>, ts: &[usize], conds: &Array2<f64>) -> Result<()> {
        let b = zs.nrows();
        if zs.ncols() != self.config.sample_dim() || conds.ncols() != self.config.cond_dim {
            return Err(Error::InvalidArgument("denoiser input shape mismatch".into()));
        }
        if ts.len() != b || conds.nrows() != b {
            return Err(Error::InvalidArgument("batch length mismatch".into()));
        }
        if ts.iter().any(|&t| t == 0 || t > self.schedule.timesteps) {
            return Err(Error::InvalidArgument("timestep out of range".into()));
        }
        Ok(())
    }

    /// Batched noise prediction. Rows of `zs` are flattened samples.
    pub fn forward(&self, zs: &Array2<f64>, ts: &[usize], conds: &Array2<f64>) -> Result<(Array2<f64>, DenoiserCache)> {
        self.check_batch(zs, ts, conds)?;
        let cfg = &self.config;
        let b = zs.nrows();
        let mut pooled = Array2::zeros((b, cfg.pooled_len()));
        for (i, row) in zs.axis_iter(Axis(0)).enumerate() {
            let scale = input_scale(&self.schedule, ts[i]);
            let p = nn::avg_pool(row.as_slice().expect("contiguous"), cfg.height, cfg.width, cfg.channels, cfg.pool);
            pooled.row_mut(i).assign(&ndarray::ArrayView1::from(&p));
            pooled.row_mut(i).mapv_inplace(|v| v * scale);
        }
        let p = &self.params;
        let l = &self.layout;
        let mut pre1 = pooled.dot(&l.w_in.mat(p).t()) + &l.b_in.vec(p) + conds.dot(&l.w_cond.mat(p).t());
        let temb = l.t_emb.mat(p);
        for (i, &t) in ts.iter().enumerate() {
            let mut row = pre1.row_mut(i);
            row += &temb.row(t - 1);
        }
        let h1 = pre1.mapv(nn::silu);
        let pre2 = h1.dot(&l.w_mid.mat(p).t()) + &l.b_mid.vec(p);
        let h2 = pre2.mapv(nn::silu) + &h1;
        let g = h2.dot(&l.w_out.mat(p).t()) + &l.b_out.vec(p);

        let (hw, c) = (cfg.height * cfg.width, cfg.channels);
        let mut u = Array2::zeros((b * hw, 2 * c));
        for i in 0..b {
            let z = zs.row(i);
            let gr = g.row(i);
            let scale = input_scale(&self.schedule, ts[i]);
            for px in 0..hw {
                for ch in 0..c {
                    u[[i * hw + px, ch]] = scale * z[px * c + ch];
                    u[[i * hw + px, c + ch]] = gr[px * c + ch];
                }
            }
        }
        let cols1 = nn::im2col(&u, b, cfg.height, cfg.width, cfg.kernel);
        let mut pre_a = cols1.dot(&l.conv1.mat(p).t()) + &l.conv1_b.vec(p);
        let conv_t = l.conv_t.mat(p);
        for (i, &t) in ts.iter().enumerate() {
            for px in 0..hw {
                let mut row = pre_a.row_mut(i * hw + px);
                row += &conv_t.row(t - 1);
            }
        }
        let act = pre_a.mapv(nn::silu);
        let cols2 = nn::im2col(&act, b, cfg.height, cfg.width, cfg.kernel);
        let local = cols2.dot(&l.conv2.mat(p).t()) + &l.conv2_b.vec(p);

        let mut eps = g;
        for (i, mut row) in eps.axis_iter_mut(Axis(0)).enumerate() {
            let (a, bc) = self.skip[ts[i] - 1];
            let z = zs.row(i);
            for px in 0..hw {
                for ch in 0..c {
                    let k = px * c + ch;
                    row[k] = a * z[k] - bc * (row[k] + local[[i * hw + px, ch]]);
                }
            }
        }
        let cache = DenoiserCache {
            pooled,
            cond: conds.clone(),
            ts: ts.to_vec(),
            pre1,
            h1,
            pre2,
            h2,
            cols1,
            pre_a,
            cols2,
        };
        Ok((eps, cache))
    }

    /// Accumulates `d loss / d params` into `grad` given `d loss / d eps`.
    pub fn backward(&self, cache: &DenoiserCache, g_eps: &Array2<f64>, grad: &mut [f64]) {
        let p = &self.params;
        let l = &self.layout;
        let cfg = &self.config;
        let b = g_eps.nrows();
        let (hw, c) = (cfg.height * cfg.width, cfg.channels);
        let mut g_x = g_eps.clone();
        for (i, mut row) in g_x.axis_iter_mut(Axis(0)).enumerate() {
            let bc = self.skip[cache.ts[i] - 1].1;
            row.mapv_inplace(|v| -bc * v);
        }

        // local branch: x = g + conv2(silu(conv1([z, g])))
        let g_local = Array2::from_shape_vec((b * hw, c), g_x.iter().copied().collect()).expect("pixel rows");
        l.conv2.mat_mut(grad).scaled_add(1.0, &g_local.t().dot(&cache.cols2));
        l.conv2_b.vec_mut(grad).scaled_add(1.0, &g_local.sum_axis(Axis(0)));
        let g_act = nn::col2im(&g_local.dot(&l.conv2.mat(p)), b, cfg.height, cfg.width, cfg.kernel, cfg.local_channels);
        let g_pre_a = g_act * &cache.pre_a.mapv(nn::silu_grad);
        l.conv1.mat_mut(grad).scaled_add(1.0, &g_pre_a.t().dot(&cache.cols1));
        l.conv1_b.vec_mut(grad).scaled_add(1.0, &g_pre_a.sum_axis(Axis(0)));
        {
            let mut conv_t = l.conv_t.mat_mut(grad);
            for (i, &t) in cache.ts.iter().enumerate() {
                let s = g_pre_a.slice(ndarray::s![i * hw..(i + 1) * hw, ..]).sum_axis(Axis(0));
                let mut row = conv_t.row_mut(t - 1);
                row += &s;
            }
        }
        let g_u = nn::col2im(&g_pre_a.dot(&l.conv1.mat(p)), b, cfg.height, cfg.width, cfg.kernel, 2 * c);
        for i in 0..b {
            let mut row = g_x.row_mut(i);
            for px in 0..hw {
                for ch in 0..c {
                    row[px * c + ch] += g_u[[i * hw + px, c + ch]];
                }
            }
        }

        l.w_out.mat_mut(grad).scaled_add(1.0, &g_x.t().dot(&cache.h2));
        l.b_out.vec_mut(grad).scaled_add(1.0, &g_x.sum_axis(Axis(0)));
        let g_h2 = g_x.dot(&l.w_out.mat(p));
        let g_pre2 = &g_h2 * &cache.pre2.mapv(nn::silu_grad);
        l.w_mid.mat_mut(grad).scaled_add(1.0, &g_pre2.t().dot(&cache.h1));
        l.b_mid.vec_mut(grad).scaled_add(1.0, &g_pre2.sum_axis(Axis(0)));
        let g_h1 = g_h2 + g_pre2.dot(&l.w_mid.mat(p));
        let g_pre1 = g_h1 * &cache.pre1.mapv(nn::silu_grad);
        l.w_in.mat_mut(grad).scaled_add(1.0, &g_pre1.t().dot(&cache.pooled));
        l.b_in.vec_mut(grad).scaled_add(1.0, &g_pre1.sum_axis(Axis(0)));
        l.w_cond.mat_mut(grad).scaled_add(1.0, &g_pre1.t().dot(&cache.cond));
        let mut temb = l.t_emb.mat_mut(grad);
        for (i, &t) in cache.ts.iter().enumerate() {
            let mut row = temb.row_mut(t - 1);
            row += &g_pre1.row(i);
        }
    }

    /// Mean over the batch of `||eps_pred - eps||^2` and its parameter gradient.
    pub fn loss_and_grad(&self, batch: &[TrainingItem], seed: u64) -> Result<(f64, Vec<f64>)> {
        let (zs, ts, conds, eps) = self.noised_batch(batch, seed)?;
        let (pred, cache) = self.forward(&zs, &ts, &conds)?;
        let diff = pred - &eps;
        let n = batch.len() as f64;
        let loss = diff.iter().map(|v| v * v).sum::<f64>() / n;
        let g = diff.mapv(|v| 2.0 * v / n);
        let mut grad = vec![0.0; self.params.len()];
        self.backward(&cache, &g, &mut grad);
        Ok((loss, grad))
    }

    fn noised_batch(
        &self,
        batch: &[TrainingItem],
        seed: u64,
    ) -> Result<(Array2<f64>, Vec<usize>, Array2<f64>, Array2<f64>)> {
        if batch.is_empty() {
            return Err(Error::InvalidArgument("empty training batch".into()));
        }
        let d = self.config.sample_dim();
        let draws = draw_training_noise(batch.len(), d, self.schedule.timesteps, seed);
        let mut zs = Array2::zeros((batch.len(), d));
        let mut conds = Array2::zeros((batch.len(), self.config.cond_dim));
        let mut eps = Array2::zeros((batch.len(), d));
        for (i, (item, (t, e))) in batch.iter().zip(&draws.0.iter().zip(&draws.1).collect::<Vec<_>>()).enumerate() {
            if item.cond.len() != self.config.cond_dim {
                return Err(Error::InvalidArgument("conditioning dimension mismatch".into()));
            }
            let zt = forward_diffuse(&item.z0, **t, e, &self.schedule)?;
            zs.row_mut(i).assign(&ndarray::ArrayView1::from(&zt));
            conds.row_mut(i).assign(&ndarray::ArrayView1::from(&item.cond));
            eps.row_mut(i).assign(&ndarray::ArrayView1::from(&e[..]));
        }
        Ok((zs, draws.0, conds, eps))
    }

    /// DDPM posterior means `mu(z_t, t, c)` for a batch of states.
    pub fn posterior_means(
        &self,
        zs: &Array2<f64>,
        ts: &[usize],
        conds: &Array2<f64>,
    ) -> Result<(Array2<f64>, DenoiserCache)> {
        let (eps, cache) = self.forward(zs, ts, conds)?;
        let mut mu = eps;
        for (i, mut row) in mu.axis_iter_mut(Axis(0)).enumerate() {
            let (c_z, c_eps) = self.mean_coefficients(ts[i]);
            let z = zs.row(i);
            for k in 0..row.len() {
                row[k] = c_z * z[k] - c_eps * row[k];
            }
        }
        Ok((mu, cache))
    }

    /// Back-propagates `d loss / d mu` from [`Denoiser::posterior_means`].
    pub fn posterior_means_backward(&self, cache: &DenoiserCache, g_mu: &Array2<f64>, grad: &mut [f64]) {
        let mut g_eps = g_mu.clone();
        for (i, mut row) in g_eps.axis_iter_mut(Axis(0)).enumerate() {
            let c_eps = self.mean_coefficients(cache.ts[i]).1;
            row.mapv_inplace(|v| -c_eps * v);
        }
        self.backward(cache, &g_eps, grad);
    }

    /// `mu = c_z z - c_eps eps` with `c_z = 1/sqrt(alpha_t)`, `c_eps = beta_t / (sqrt(alpha_t) sqrt(1 - abar_t))`.
    fn mean_coefficients(&self, t: usize) -> (f64, f64) {
        let s = &self.schedule;
        let ra = s.alpha(t).sqrt();
        (1.0 / ra, s.beta(t) / (ra * (1.0 - s.alpha_bar(t)).sqrt()))
    }

    pub fn to_checkpoint(&self) -> Result<String> {
        let ck = DenoiserCheckpoint {
            format: DENOISER_FORMAT.into(),
            version: checkpoint::VERSION,
            config: self.config,
            schedule: ScheduleHeader {
                timesteps: self.schedule.timesteps,
                beta_min: self.schedule.beta_min,
                beta_max: self.schedule.beta_max,
            },
            parameters: ParamBlob::encode(&self.params),
        };
        Ok(serde_json::to_string(&ck)?)
    }

    pub fn from_checkpoint(text: &str) -> Result<Self> {
        let ck: DenoiserCheckpoint = serde_json::from_str(text)?;
        if ck.format != DENOISER_FORMAT || ck.version != checkpoint::VERSION {
            return Err(Error::Checkpoint(format!("unsupported {} v{}", ck.format, ck.version)));
        }
        let schedule = NoiseSchedule::linear(ck.schedule.timesteps, ck.schedule.beta_min, ck.schedule.beta_max)?;
        let mut model = Denoiser::new(ck.config, schedule, 0)?;
        let params = ck.parameters.decode()?;
        if params.len() != model.params.len() {
            return Err(Error::Checkpoint(format!(
                "expected {} parameters, found {}",
                model.params.len(),
                params.len()
            )));
        }
        model.params = params;
        Ok(model)
    }
}

impl NoisePredictor for Denoiser {
    fn schedule(&self) -> &NoiseSchedule {
        &self.schedule
    }

    fn sample_dim(&self) -> usize {
        self.config.sample_dim()
    }

    fn predict(&self, z: &[f64], t: usize, cond: &[f64]) -> Vec<f64> {
        let zs = Array2::from_shape_vec((1, z.len()), z.to_vec()).expect("row");
        let cs = Array2::from_shape_vec((1, cond.len()), cond.to_vec()).expect("row");
        let (eps, _) = self.forward(&zs, &[t], &cs).expect("valid denoiser input");
        eps.into_raw_vec_and_offset().0
    }
}

const DENOISER_FORMAT: &str = "cogen-denoiser";

#[derive(Serialize, Deserialize)]
struct ScheduleHeader {
    timesteps: usize,
    beta_min: f64,
    beta_max: f64,
}

#[derive(Serialize, Deserialize)]
struct DenoiserCheckpoint {
    format: String,
    version: u32,
    config: DenoiserConfig,
    schedule: ScheduleHeader,
    parameters: ParamBlob,
}

/// One clean sample with its conditioning vector.
#[derive(Debug, Clone)]
pub struct TrainingItem {
    pub z0: Vec<f64>,
    pub cond: Vec<f64>,
}

/// Seed-determined timesteps (uniform in 1..=T) and standard-normal noise for a batch.
pub fn draw_training_noise(n: usize, dim: usize, timesteps: usize, seed: u64) -> (Vec<usize>, Vec<Vec<f64>>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut ts = Vec::with_capacity(n);
    let mut eps = Vec::with_capacity(n);
    for _ in 0..n {
        ts.push(rng.gen_range(1..=timesteps));
        eps.push(standard_normal_vec(&mut rng, dim));
    }
    (ts, eps)
}

pub fn standard_normal_vec<R: Rng + ?Sized>(rng: &mut R, n: usize) -> Vec<f64> {
    (0..n).map(|_| StandardNormal.sample(rng)).collect()
}

/// Noise-prediction loss for any predictor: mean over the batch of
/// `||eps_pred(z_t, t, c) - eps||^2`, with `t` and `eps` drawn from `seed`.
pub fn diffusion_loss<P: NoisePredictor + ?Sized>(model: &P, batch: &[TrainingItem], seed: u64) -> Result<f64> {
    if batch.is_empty() {
        return Err(Error::InvalidArgument("empty training batch".into()));
    }
    let schedule = model.schedule();
    let (ts, eps) = draw_training_noise(batch.len(), model.sample_dim(), schedule.timesteps, seed);
    let mut total = 0.0;
    for ((item, t), e) in batch.iter().zip(&ts).zip(&eps) {
        let zt = forward_diffuse(&item.z0, *t, e, schedule)?;
        let pred = model.predict(&zt, *t, &item.cond);
        total += pred.iter().zip(e).map(|(p, q)| (p - q) * (p - q)).sum::<f64>();
    }
    Ok(total / batch.len() as f64)
}

/// Deterministic DDIM (eta = 0). `clip_denoised` clamps each clean estimate to [-1, 1].
/// The returned sample is clamped to [-1, 1].
pub fn sample_ddim<P: NoisePredictor + ?Sized>(
    model: &P,
    cond: &[f64],
    steps: usize,
    seed: u64,
    clip_denoised: bool,
) -> Result<Vec<f64>> {
    let schedule = model.schedule();
    let ts = schedule.ddim_timesteps(steps)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut z = standard_normal_vec(&mut rng, model.sample_dim());
    for (i, &t) in ts.iter().enumerate() {
        let prev = ts.get(i + 1).copied().unwrap_or(0);
        let eps = model.predict(&z, t, cond);
        let ab = schedule.alpha_bar(t);
        let ab_prev = schedule.alpha_bar(prev);
        let (sa, sn) = (ab.sqrt(), (1.0 - ab).sqrt());
        let (pa, pn) = (ab_prev.sqrt(), (1.0 - ab_prev).sqrt());
        for k in 0..z.len() {
            let mut x0 = (z[k] - sn * eps[k]) / sa;
            if clip_denoised {
                x0 = x0.clamp(-1.0, 1.0);
            }
            z[k] = pa * x0 + pn * eps[k];
        }
    }
    for v in z.iter_mut() {
        *v = v.clamp(-1.0, 1.0);
    }
    Ok(z)
}

/// Conditioning under which a trajectory was sampled.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Conditioning {
    pub tokens: Vec<String>,
    pub weights: Option<Vec<f64>>,
    pub vector: Vec<f64>,
}

/// Record of one ancestral sampling run. `states[k]` is the state at
/// `t = T - k` (so `states[T]` is the final sample); `means[k]` and `sigmas[k]`
/// parameterise the Gaussian step from `states[k]` to `states[k + 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub timesteps: usize,
    pub states: Vec<Vec<f64>>,
    pub means: Vec<Vec<f64>>,
    pub sigmas: Vec<f64>,
    pub conditioning: Conditioning,
    pub seed: u64,
}

/// One recorded `(state, action)` transition.
#[derive(Debug, Clone, Copy)]
pub struct Step<'a> {
    pub t: usize,
    pub state: &'a [f64],
    pub mean: &'a [f64],
    pub sigma: f64,
    pub action: &'a [f64],
}

impl Trajectory {
    /// Steps ordered t = T ... 1.
    pub fn steps(&self) -> impl Iterator<Item = Step<'_>> + '_ {
        (0..self.timesteps).map(move |k| Step {
            t: self.timesteps - k,
            state: &self.states[k],
            mean: &self.means[k],
            sigma: self.sigmas[k],
            action: &self.states[k + 1],
        })
    }

    pub fn final_sample(&self) -> &[f64] {
        &self.states[self.timesteps]
    }
}

/// DDPM ancestral sampling with `sigma_t^2 = beta_t`, recording every step.
pub fn sample_ancestral<P: NoisePredictor + ?Sized>(
    model: &P,
    conditioning: Conditioning,
    seed: u64,
) -> Result<(Vec<f64>, Trajectory)> {
    let schedule = model.schedule();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let d = model.sample_dim();
    let mut z = standard_normal_vec(&mut rng, d);
    let big_t = schedule.timesteps;
    let mut states = Vec::with_capacity(big_t + 1);
    let mut means = Vec::with_capacity(big_t);
    let mut sigmas = Vec::with_capacity(big_t);
    states.push(z.clone());
    for t in (1..=big_t).rev() {
        let sigma = schedule.sigma(t);
        if !(sigma > 0.0) {
            return Err(Error::ZeroSigma(t));
        }
        let eps = model.predict(&z, t, &conditioning.vector);
        let ra = schedule.alpha(t).sqrt();
        let c_eps = schedule.beta(t) / (1.0 - schedule.alpha_bar(t)).sqrt();
        let mu: Vec<f64> = z.iter().zip(&eps).map(|(zv, e)| (zv - c_eps * e) / ra).collect();
        let noise = standard_normal_vec(&mut rng, d);
        z = mu.iter().zip(&noise).map(|(m, n)| m + sigma * n).collect();
        means.push(mu);
        sigmas.push(sigma);
        states.push(z.clone());
    }
    let image: Vec<f64> = z.iter().map(|v| v.clamp(-1.0, 1.0)).collect();
    Ok((image, Trajectory { timesteps: big_t, states, means, sigmas, conditioning, seed }))
}
