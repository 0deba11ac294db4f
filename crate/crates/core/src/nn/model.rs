//! The path-loss CNN: conv blocks (conv, ReLU, max pool) followed by dense
//! layers. FLIP models concatenate the scalar features to the flattened
//! conv output before the first dense layer.

use std::fmt;
use std::str::FromStr;
use std::sync::atomic::{AtomicU64, Ordering};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;

use super::layers::{self, Dims};
use super::Real;
use crate::error::{Error, Result};
use crate::profile::{ChannelConfig, ModelInput, DEFAULT_WIDTH, PROFILE_ROWS};

/// Samples per gradient work unit. Fixed so that the reduction order, and
/// therefore every bit of the result, is independent of the thread count.
pub const GRAD_CHUNK: usize = 8;

static NEXT_STAMP: AtomicU64 = AtomicU64::new(1);

fn next_stamp() -> u64 {
    NEXT_STAMP.fetch_add(1, Ordering::Relaxed)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvBlockSpec {
    pub out_channels: usize,
    /// Odd square kernel size.
    pub kernel: usize,
    /// Max-pool window and stride; 1 disables pooling.
    pub pool: usize,
}

impl ConvBlockSpec {
    pub const fn new(out_channels: usize, kernel: usize, pool: usize) -> Self {
        Self {
            out_channels,
            kernel,
            pool,
        }
    }
}

/// Network topology. The final 1-wide output layer is implicit.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ArchSpec {
    pub input_rows: usize,
    pub input_width: usize,
    pub conv: Vec<ConvBlockSpec>,
    /// Hidden dense widths, each followed by ReLU.
    pub hidden: Vec<usize>,
}

impl Default for ArchSpec {
    fn default() -> Self {
        Self {
            input_rows: PROFILE_ROWS,
            input_width: DEFAULT_WIDTH,
            conv: vec![
                ConvBlockSpec::new(16, 3, 2),
                ConvBlockSpec::new(32, 3, 2),
                ConvBlockSpec::new(64, 3, 2),
                ConvBlockSpec::new(64, 3, 2),
            ],
            hidden: vec![128, 64],
        }
    }
}

impl ArchSpec {
    /// Compact topology that trains in minutes on a single core.
    pub fn desk() -> Self {
        Self {
            input_rows: PROFILE_ROWS,
            input_width: DEFAULT_WIDTH,
            conv: vec![
                ConvBlockSpec::new(6, 3, 4),
                ConvBlockSpec::new(8, 3, 2),
                ConvBlockSpec::new(16, 3, 2),
                ConvBlockSpec::new(16, 3, 2),
            ],
            hidden: vec![32, 16],
        }
    }

    /// Activation geometry at the input of every conv block, plus the
    /// geometry of the final pooled output.
    pub fn conv_dims(&self, in_channels: usize) -> Result<Vec<Dims>> {
        if in_channels == 0 || self.input_rows == 0 || self.input_width == 0 {
            return Err(Error::Shape("empty input geometry".into()));
        }
        let mut dims = vec![Dims::new(in_channels, self.input_rows, self.input_width)];
        for (i, b) in self.conv.iter().enumerate() {
            if b.out_channels == 0 || b.kernel % 2 == 0 || b.pool == 0 {
                return Err(Error::Shape(format!("invalid conv block {i}: {b:?}")));
            }
            let cur = *dims.last().unwrap();
            let next = layers::pool_dims(Dims::new(b.out_channels, cur.h, cur.w), b.pool);
            if next.h == 0 || next.w == 0 {
                return Err(Error::Shape(format!(
                    "conv block {i} pools a {}x{} map down to nothing",
                    cur.h, cur.w
                )));
            }
            dims.push(next);
        }
        Ok(dims)
    }

    pub fn flatten_width(&self, in_channels: usize) -> Result<usize> {
        Ok(self.conv_dims(in_channels)?.last().unwrap().len())
    }

    /// `(n_in, n_out)` of every dense layer, including the output layer.
    pub fn dense_shapes(&self, config: &ChannelConfig) -> Result<Vec<(usize, usize)>> {
        if self.hidden.contains(&0) {
            return Err(Error::Shape("zero-width hidden layer".into()));
        }
        let mut n_in = self.flatten_width(config.n_channels)? + config.n_scalars;
        let mut shapes = Vec::new();
        for &w in self.hidden.iter().chain(std::iter::once(&1)) {
            shapes.push((n_in, w));
            n_in = w;
        }
        Ok(shapes)
    }
}

/// Text form: `conv=16/3/2,32/3/2;fc=128,64;input=256x61`, or `default`
/// or `desk`.
impl fmt::Display for ArchSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let conv: Vec<String> = self
            .conv
            .iter()
            .map(|b| format!("{}/{}/{}", b.out_channels, b.kernel, b.pool))
            .collect();
        let fc: Vec<String> = self.hidden.iter().map(|w| w.to_string()).collect();
        write!(
            f,
            "conv={};fc={};input={}x{}",
            conv.join(","),
            fc.join(","),
            self.input_rows,
            self.input_width
        )
    }
}

impl FromStr for ArchSpec {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim();
        match s {
            "default" => return Ok(Self::default()),
            "desk" => return Ok(Self::desk()),
            _ => {}
        }
        let bad = |why: &str| Error::Config(format!("bad architecture {s:?}: {why}"));
        let num = |t: &str| t.trim().parse::<usize>().map_err(|_| bad("expected integer"));
        let mut arch = ArchSpec {
            conv: Vec::new(),
            hidden: Vec::new(),
            ..Self::default()
        };
        for part in s.split(';').filter(|p| !p.trim().is_empty()) {
            let (key, value) = part.split_once('=').ok_or_else(|| bad("missing '='"))?;
            match key.trim() {
                "conv" => {
                    for block in value.split(',').filter(|b| !b.trim().is_empty()) {
                        let f: Vec<&str> = block.split('/').collect();
                        if f.len() != 3 {
                            return Err(bad("conv blocks are out/kernel/pool"));
                        }
                        arch.conv
                            .push(ConvBlockSpec::new(num(f[0])?, num(f[1])?, num(f[2])?));
                    }
                }
                "fc" => {
                    for w in value.split(',').filter(|w| !w.trim().is_empty()) {
                        arch.hidden.push(num(w)?);
                    }
                }
                "input" => {
                    let (r, c) = value.split_once('x').ok_or_else(|| bad("input is ROWSxWIDTH"))?;
                    arch.input_rows = num(r)?;
                    arch.input_width = num(c)?;
                }
                other => return Err(bad(&format!("unknown key {other}"))),
            }
        }
        Ok(arch)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConvLayer<F> {
    pub out_ch: usize,
    pub in_ch: usize,
    pub k: usize,
    /// `[out][in][k][k]`.
    pub weights: Vec<F>,
    pub bias: Vec<F>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DenseLayer<F> {
    pub n_in: usize,
    pub n_out: usize,
    /// `[out][in]`.
    pub weights: Vec<F>,
    pub bias: Vec<F>,
}

/// All trainable parameters. Also used as the gradient container.
#[derive(Debug, Clone, PartialEq)]
pub struct Params<F> {
    pub conv: Vec<ConvLayer<F>>,
    pub dense: Vec<DenseLayer<F>>,
}

impl<F: Real> Params<F> {
    pub fn zeros_like(&self) -> Self {
        Self {
            conv: self
                .conv
                .iter()
                .map(|l| ConvLayer {
                    weights: vec![F::zero(); l.weights.len()],
                    bias: vec![F::zero(); l.bias.len()],
                    ..*l
                })
                .collect(),
            dense: self
                .dense
                .iter()
                .map(|l| DenseLayer {
                    weights: vec![F::zero(); l.weights.len()],
                    bias: vec![F::zero(); l.bias.len()],
                    ..*l
                })
                .collect(),
        }
    }

    /// Parameter buffers in canonical order: conv layers, then dense
    /// layers, weights before biases.
    pub fn buffers(&self) -> Vec<&[F]> {
        let mut out: Vec<&[F]> = Vec::new();
        for l in &self.conv {
            out.push(&l.weights);
            out.push(&l.bias);
        }
        for l in &self.dense {
            out.push(&l.weights);
            out.push(&l.bias);
        }
        out
    }

    pub fn buffers_mut(&mut self) -> Vec<&mut [F]> {
        let mut out: Vec<&mut [F]> = Vec::new();
        for l in &mut self.conv {
            out.push(&mut l.weights);
            out.push(&mut l.bias);
        }
        for l in &mut self.dense {
            out.push(&mut l.weights);
            out.push(&mut l.bias);
        }
        out
    }

    pub fn len(&self) -> usize {
        self.buffers().iter().map(|b| b.len()).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn to_f64_vec(&self) -> Vec<f64> {
        self.buffers()
            .into_iter()
            .flat_map(|b| b.iter().map(|v| v.to64()))
            .collect()
    }

    pub fn load_f64(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.len() {
            return Err(Error::Shape(format!(
                "parameter blob has {} values, model needs {}",
                flat.len(),
                self.len()
            )));
        }
        let mut it = flat.iter();
        for buf in self.buffers_mut() {
            for v in buf.iter_mut() {
                *v = F::of(*it.next().unwrap());
            }
        }
        Ok(())
    }

    pub fn add_assign(&mut self, other: &Self) {
        for (a, b) in self.buffers_mut().into_iter().zip(other.buffers()) {
            for (x, y) in a.iter_mut().zip(b) {
                *x += *y;
            }
        }
    }

    pub fn all_finite(&self) -> bool {
        self.buffers()
            .iter()
            .all(|b| b.iter().all(|v| v.is_finite()))
    }
}

/// Activations recorded during one sample's forward pass.
#[derive(Debug, Clone)]
struct SampleCache<F> {
    block_in: Vec<Vec<F>>,
    relu_out: Vec<Vec<F>>,
    argmax: Vec<Vec<u32>>,
    dense_in: Vec<Vec<F>>,
}

/// Forward-pass record needed by [`CnnModel::backward`].
#[derive(Debug, Clone)]
pub struct BatchCache<F> {
    stamp: u64,
    samples: Vec<SampleCache<F>>,
}

impl<F> BatchCache<F> {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }
}

#[derive(Debug, Clone)]
pub struct CnnModel<F> {
    config: ChannelConfig,
    arch: ArchSpec,
    dims: Vec<Dims>,
    params: Params<F>,
    stamp: u64,
}

impl<F: Real> PartialEq for CnnModel<F> {
    fn eq(&self, other: &Self) -> bool {
        self.config == other.config && self.arch == other.arch && self.params == other.params
    }
}

impl<F: Real> CnnModel<F> {
    /// He-normal weights drawn from a seeded stream, zero biases.
    pub fn build(config: ChannelConfig, arch: ArchSpec, seed: u64) -> Result<Self> {
        let mut model = Self::zeroed(config, arch)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut fill = |w: &mut [F], fan_in: usize| {
            let normal = Normal::new(0.0, (2.0 / fan_in as f64).sqrt()).unwrap();
            for v in w {
                *v = F::of(normal.sample(&mut rng));
            }
        };
        for l in &mut model.params.conv {
            fill(&mut l.weights, l.in_ch * l.k * l.k);
        }
        for l in &mut model.params.dense {
            fill(&mut l.weights, l.n_in);
        }
        Ok(model)
    }

    /// All parameters zero.
    pub fn zeroed(config: ChannelConfig, arch: ArchSpec) -> Result<Self> {
        config.validate()?;
        let dims = arch.conv_dims(config.n_channels)?;
        let conv = arch
            .conv
            .iter()
            .zip(&dims)
            .map(|(b, d)| ConvLayer {
                out_ch: b.out_channels,
                in_ch: d.c,
                k: b.kernel,
                weights: vec![F::zero(); b.out_channels * d.c * b.kernel * b.kernel],
                bias: vec![F::zero(); b.out_channels],
            })
            .collect();
        let dense = arch
            .dense_shapes(&config)?
            .into_iter()
            .map(|(n_in, n_out)| DenseLayer {
                n_in,
                n_out,
                weights: vec![F::zero(); n_in * n_out],
                bias: vec![F::zero(); n_out],
            })
            .collect();
        Ok(Self {
            config,
            arch,
            dims,
            params: Params { conv, dense },
            stamp: next_stamp(),
        })
    }

    pub fn config(&self) -> &ChannelConfig {
        &self.config
    }

    pub fn arch(&self) -> &ArchSpec {
        &self.arch
    }

    pub fn params(&self) -> &Params<F> {
        &self.params
    }

    /// Mutable parameter access; invalidates outstanding forward caches.
    pub fn params_mut(&mut self) -> &mut Params<F> {
        self.stamp = next_stamp();
        &mut self.params
    }

    /// Scalar-junction width in front of the first dense layer.
    pub fn junction_width(&self) -> usize {
        self.config.n_scalars
    }

    pub fn flatten_width(&self) -> usize {
        self.dims.last().unwrap().len()
    }

    pub fn first_dense_width(&self) -> usize {
        self.params.dense[0].n_in
    }

    pub fn check_input(&self, input: &ModelInput) -> Result<()> {
        let want = [self.config.n_channels, self.arch.input_rows, self.arch.input_width];
        if input.channels.shape() != want {
            return Err(Error::Shape(format!(
                "input channels {:?}, model expects {want:?}",
                input.channels.shape()
            )));
        }
        if input.scalars.len() != self.config.n_scalars {
            return Err(Error::Shape(format!(
                "input has {} scalars, model expects {}",
                input.scalars.len(),
                self.config.n_scalars
            )));
        }
        Ok(())
    }

    fn forward_sample(&self, input: &ModelInput, mut cache: Option<&mut SampleCache<F>>) -> F {
        let mut x: Vec<F> = input.channels.data().iter().map(|&v| F::of32(v)).collect();
        for (b, layer) in self.params.conv.iter().enumerate() {
            let d = self.dims[b];
            let spec = self.arch.conv[b];
            let mut act = vec![F::zero(); layer.out_ch * d.plane()];
            layers::conv2d_forward(&x, d, &layer.weights, &layer.bias, layer.out_ch, layer.k, &mut act);
            layers::relu_forward(&mut act);
            let next = self.dims[b + 1];
            let mut pooled = vec![F::zero(); next.len()];
            let mut argmax = vec![0u32; next.len()];
            let conv_dims = Dims::new(layer.out_ch, d.h, d.w);
            layers::maxpool_forward(&act, conv_dims, spec.pool, &mut pooled, &mut argmax);
            if let Some(c) = cache.as_deref_mut() {
                c.block_in.push(std::mem::replace(&mut x, pooled));
                c.relu_out.push(act);
                c.argmax.push(argmax);
            } else {
                x = pooled;
            }
        }
        x.extend(input.scalars.iter().map(|&s| F::of32(s)));
        let last = self.params.dense.len() - 1;
        for (l, layer) in self.params.dense.iter().enumerate() {
            let mut y = vec![F::zero(); layer.n_out];
            layers::dense_forward(&x, &layer.weights, &layer.bias, &mut y);
            if l != last {
                layers::relu_forward(&mut y);
            }
            if let Some(c) = cache.as_deref_mut() {
                c.dense_in.push(std::mem::replace(&mut x, y));
            } else {
                x = y;
            }
        }
        x[0]
    }

    fn backward_sample(&self, cache: &SampleCache<F>, dpred: F, grads: &mut Params<F>) {
        let mut g = vec![dpred];
        for l in (0..self.params.dense.len()).rev() {
            let layer = &self.params.dense[l];
            let x = &cache.dense_in[l];
            let mut gin = vec![F::zero(); layer.n_in];
            let gl = &mut grads.dense[l];
            layers::dense_backward(x, &layer.weights, &g, &mut gl.weights, &mut gl.bias, Some(&mut gin));
            if l > 0 {
                // Input of layer l is the ReLU output of layer l - 1.
                layers::relu_backward(x, &mut gin);
            }
            g = gin;
        }
        g.truncate(self.flatten_width());
        for b in (0..self.params.conv.len()).rev() {
            let layer = &self.params.conv[b];
            let d = self.dims[b];
            let relu_out = &cache.relu_out[b];
            let mut g_act = vec![F::zero(); relu_out.len()];
            layers::maxpool_backward(&g, &cache.argmax[b], &mut g_act);
            layers::relu_backward(relu_out, &mut g_act);
            let gl = &mut grads.conv[b];
            if b > 0 {
                let mut gin = vec![F::zero(); d.len()];
                layers::conv2d_backward(
                    &cache.block_in[b],
                    d,
                    &layer.weights,
                    layer.out_ch,
                    layer.k,
                    &g_act,
                    &mut gl.weights,
                    &mut gl.bias,
                    Some(&mut gin),
                );
                g = gin;
            } else {
                layers::conv2d_backward(
                    &cache.block_in[b],
                    d,
                    &layer.weights,
                    layer.out_ch,
                    layer.k,
                    &g_act,
                    &mut gl.weights,
                    &mut gl.bias,
                    None,
                );
            }
        }
    }

    fn empty_cache(&self) -> SampleCache<F> {
        let n = self.params.conv.len();
        SampleCache {
            block_in: Vec::with_capacity(n),
            relu_out: Vec::with_capacity(n),
            argmax: Vec::with_capacity(n),
            dense_in: Vec::with_capacity(self.params.dense.len()),
        }
    }

    /// Predictions only, no activation cache.
    pub fn predict(&self, batch: &[&ModelInput]) -> Result<Vec<F>> {
        for s in batch {
            self.check_input(s)?;
        }
        Ok(batch
            .par_iter()
            .map(|s| self.forward_sample(s, None))
            .collect())
    }

    pub fn predict_one(&self, input: &ModelInput) -> Result<F> {
        self.check_input(input)?;
        Ok(self.forward_sample(input, None))
    }

    /// Inputs of the final dense layer, one vector per sample.
    pub fn readout_features(&self, batch: &[&ModelInput]) -> Result<Vec<Vec<F>>> {
        for s in batch {
            self.check_input(s)?;
        }
        Ok(batch
            .par_iter()
            .map(|s| {
                let mut c = self.empty_cache();
                self.forward_sample(s, Some(&mut c));
                c.dense_in.pop().expect("at least one dense layer")
            })
            .collect())
    }

    /// Forward pass recording everything [`Self::backward`] needs.
    pub fn forward(&self, batch: &[&ModelInput]) -> Result<(Vec<F>, BatchCache<F>)> {
        for s in batch {
            self.check_input(s)?;
        }
        let (preds, samples): (Vec<F>, Vec<SampleCache<F>>) = batch
            .par_iter()
            .map(|s| {
                let mut c = self.empty_cache();
                let p = self.forward_sample(s, Some(&mut c));
                (p, c)
            })
            .unzip();
        Ok((
            preds,
            BatchCache {
                stamp: self.stamp,
                samples,
            },
        ))
    }

    /// Parameter gradients given `dL/dprediction` for every sample.
    pub fn backward(&self, cache: &BatchCache<F>, loss_grad: &[F]) -> Result<Params<F>> {
        if cache.stamp != self.stamp {
            return Err(Error::Shape(
                "activation cache is stale: parameters changed since the forward pass".into(),
            ));
        }
        if cache.samples.len() != loss_grad.len() {
            return Err(Error::Shape(format!(
                "cache holds {} samples, got {} loss gradients",
                cache.samples.len(),
                loss_grad.len()
            )));
        }
        let parts: Vec<Params<F>> = cache
            .samples
            .par_chunks(GRAD_CHUNK)
            .zip(loss_grad.par_chunks(GRAD_CHUNK))
            .map(|(samples, grads)| {
                let mut acc = self.params.zeros_like();
                for (s, &g) in samples.iter().zip(grads) {
                    self.backward_sample(s, g, &mut acc);
                }
                acc
            })
            .collect();
        Ok(reduce_in_order(parts, || self.params.zeros_like()))
    }

    /// Mean squared error over `batch` and its parameter gradient, computed
    /// sample by sample without holding the whole batch's activations.
    pub fn mse_and_gradients(&self, batch: &[&ModelInput]) -> Result<(f64, Params<F>)> {
        if batch.is_empty() {
            return Err(Error::Empty("training batch"));
        }
        for s in batch {
            self.check_input(s)?;
            if s.target.is_none() {
                return Err(Error::Config("training sample without target".into()));
            }
        }
        let n = batch.len() as f64;
        let parts: Vec<(f64, Params<F>)> = batch
            .par_chunks(GRAD_CHUNK)
            .map(|chunk| {
                let mut acc = self.params.zeros_like();
                let mut sse = 0.0f64;
                for s in chunk {
                    let mut cache = self.empty_cache();
                    let p = self.forward_sample(s, Some(&mut cache));
                    let diff = p.to64() - s.target.unwrap() as f64;
                    sse += diff * diff;
                    self.backward_sample(&cache, F::of(2.0 * diff / n), &mut acc);
                }
                (sse, acc)
            })
            .collect();
        let sse: f64 = parts.iter().map(|(s, _)| s).sum();
        let grads = reduce_in_order(parts.into_iter().map(|(_, g)| g).collect(), || {
            self.params.zeros_like()
        });
        Ok((sse / n, grads))
    }
}

fn reduce_in_order<F: Real>(parts: Vec<Params<F>>, zero: impl FnOnce() -> Params<F>) -> Params<F> {
    let mut it = parts.into_iter();
    let mut total = it.next().unwrap_or_else(zero);
    for p in it {
        total.add_assign(&p);
    }
    total
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::profile::ConfigKind;
    use crate::tensor::Tensor;
    use rand::Rng;

    fn micro_arch(rows: usize, width: usize) -> ArchSpec {
        ArchSpec {
            input_rows: rows,
            input_width: width,
            conv: vec![ConvBlockSpec::new(3, 3, 2), ConvBlockSpec::new(2, 3, 1)],
            hidden: vec![5],
        }
    }

    pub(crate) fn random_input(cfg: &ChannelConfig, rows: usize, width: usize, rng: &mut ChaCha8Rng) -> ModelInput {
        let n = cfg.n_channels * rows * width;
        ModelInput {
            channels: Tensor::new(
                vec![cfg.n_channels, rows, width],
                (0..n).map(|_| rng.random_range(-1.0f32..1.0)).collect(),
            )
            .unwrap(),
            scalars: (0..cfg.n_scalars).map(|_| rng.random_range(0.0f32..1.0)).collect(),
            target: Some(rng.random_range(0.3f32..0.8)),
        }
    }

    #[test]
    fn default_arch_shapes_follow_configuration() {
        let orig = CnnModel::<f32>::zeroed(ChannelConfig::of(ConfigKind::Original), ArchSpec::default())
            .unwrap();
        assert_eq!(orig.params().conv[0].in_ch, 4);
        assert_eq!(orig.junction_width(), 0);
        // 256x61 -> 128x30 -> 64x15 -> 32x7 -> 16x3, 64 channels.
        assert_eq!(orig.flatten_width(), 64 * 16 * 3);
        assert_eq!(orig.first_dense_width(), orig.flatten_width());
        let flip = CnnModel::<f32>::zeroed(ChannelConfig::of(ConfigKind::Flip), ArchSpec::default())
            .unwrap();
        assert_eq!(flip.params().conv[0].in_ch, 2);
        assert_eq!(flip.junction_width(), 2);
        assert_eq!(flip.first_dense_width(), flip.flatten_width() + 2);
        assert_eq!(flip.params().dense.last().unwrap().n_out, 1);
    }

    #[test]
    fn arch_rejects_inconsistent_shapes() {
        let cfg = ChannelConfig::of(ConfigKind::Fine);
        let mut arch = ArchSpec::default();
        arch.conv.push(ConvBlockSpec::new(8, 3, 32));
        assert!(matches!(CnnModel::<f32>::build(cfg, arch, 0), Err(Error::Shape(_))));
        let mut arch = ArchSpec::default();
        arch.conv[0].kernel = 4;
        assert!(CnnModel::<f32>::build(cfg, arch, 0).is_err());
    }

    #[test]
    fn arch_text_round_trip() {
        for a in [ArchSpec::default(), ArchSpec::desk(), micro_arch(9, 7)] {
            assert_eq!(a.to_string().parse::<ArchSpec>().unwrap(), a);
        }
        assert_eq!("desk".parse::<ArchSpec>().unwrap(), ArchSpec::desk());
        assert!("conv=1/2".parse::<ArchSpec>().is_err());
    }

    #[test]
    fn same_seed_same_parameters() {
        let cfg = ChannelConfig::of(ConfigKind::Original);
        let a = CnnModel::<f32>::build(cfg, ArchSpec::desk(), 42).unwrap();
        let b = CnnModel::<f32>::build(cfg, ArchSpec::desk(), 42).unwrap();
        let c = CnnModel::<f32>::build(cfg, ArchSpec::desk(), 43).unwrap();
        assert_eq!(a.params(), b.params());
        assert_ne!(a.params(), c.params());
        assert!(a.params().conv.iter().all(|l| l.bias.iter().all(|&b| b == 0.0)));
    }

    #[test]
    fn zero_network_outputs_final_bias() {
        let cfg = ChannelConfig::of(ConfigKind::Flip);
        let mut m = CnnModel::<f32>::zeroed(cfg, micro_arch(8, 6)).unwrap();
        m.params_mut().dense.last_mut().unwrap().bias[0] = 0.75;
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let inputs: Vec<ModelInput> = (0..5).map(|_| random_input(&cfg, 8, 6, &mut rng)).collect();
        let refs: Vec<&ModelInput> = inputs.iter().collect();
        assert!(m.predict(&refs).unwrap().iter().all(|&p| p == 0.75));
    }

    #[test]
    fn hand_computed_micro_model() {
        // One 1->1 conv with a centre-only kernel (weight 2, bias 1), ReLU,
        // 2x2 max pool, then a dense layer with weights [1, 2, 3, 4], bias 0.5.
        let cfg = ChannelConfig::of(ConfigKind::Original);
        let arch = ArchSpec {
            input_rows: 4,
            input_width: 4,
            conv: vec![ConvBlockSpec::new(1, 3, 2)],
            hidden: vec![],
        };
        let mut m = CnnModel::<f64>::zeroed(cfg, arch).unwrap();
        {
            let p = m.params_mut();
            // Only the first of the 4 input channels is used.
            p.conv[0].weights[4] = 2.0;
            p.conv[0].bias[0] = 1.0;
            p.dense[0].weights = vec![1.0, 2.0, 3.0, 4.0];
            p.dense[0].bias[0] = 0.5;
        }
        let mut data = vec![0.0f32; 4 * 16];
        let img = [
            1.0, -3.0, 0.5, 2.0, //
            0.0, 4.0, -1.0, -2.0, //
            -5.0, -6.0, 1.5, 0.25, //
            -1.0, 0.0, 3.0, -4.0,
        ];
        data[..16].copy_from_slice(&img);
        let input = ModelInput {
            channels: Tensor::new(vec![4, 4, 4], data).unwrap(),
            scalars: vec![],
            target: None,
        };
        // relu(2x + 1) window maxima: max(3,0,1,9)=9, max(2,5,0,0)=5,
        // max(0,0,0,1)=1, max(4,1,7,0)=7.
        let want = 0.5 + 9.0 + 2.0 * 5.0 + 3.0 * 1.0 + 4.0 * 7.0;
        assert_eq!(m.predict_one(&input).unwrap(), want);
    }

    #[test]
    fn batch_of_256_matches_single_sample() {
        let cfg = ChannelConfig::of(ConfigKind::Fine);
        let m = CnnModel::<f32>::build(cfg, micro_arch(8, 6), 3).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let inputs: Vec<ModelInput> = (0..256).map(|_| random_input(&cfg, 8, 6, &mut rng)).collect();
        let refs: Vec<&ModelInput> = inputs.iter().collect();
        let batch = m.predict(&refs).unwrap();
        for (i, s) in inputs.iter().enumerate().step_by(37) {
            assert!((m.predict_one(s).unwrap() - batch[i]).abs() <= 1e-6);
        }
        // Permutation equivariance.
        let rev: Vec<&ModelInput> = inputs.iter().rev().collect();
        let rp = m.predict(&rev).unwrap();
        for (a, b) in batch.iter().zip(rp.iter().rev()) {
            assert_eq!(a, b);
        }
    }

    #[test]
    fn wrong_input_shape_rejected() {
        let cfg = ChannelConfig::of(ConfigKind::Fine);
        let m = CnnModel::<f32>::build(cfg, micro_arch(8, 6), 3).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let flip = random_input(&ChannelConfig::of(ConfigKind::Flip), 8, 6, &mut rng);
        assert!(matches!(m.predict(&[&flip]), Err(Error::Shape(_))));
    }

    #[test]
    fn zero_loss_gradient_gives_zero_gradients() {
        let cfg = ChannelConfig::of(ConfigKind::Flip);
        let m = CnnModel::<f64>::build(cfg, micro_arch(8, 6), 5).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let inputs: Vec<ModelInput> = (0..3).map(|_| random_input(&cfg, 8, 6, &mut rng)).collect();
        let refs: Vec<&ModelInput> = inputs.iter().collect();
        let (_, cache) = m.forward(&refs).unwrap();
        let g = m.backward(&cache, &[0.0; 3]).unwrap();
        assert!(g.to_f64_vec().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn stale_cache_rejected() {
        let cfg = ChannelConfig::of(ConfigKind::Fine);
        let mut m = CnnModel::<f64>::build(cfg, micro_arch(8, 6), 5).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = random_input(&cfg, 8, 6, &mut rng);
        let (_, cache) = m.forward(&[&x]).unwrap();
        assert!(m.backward(&cache, &[1.0, 2.0]).is_err());
        m.params_mut().dense[0].bias[0] += 1.0;
        assert!(m.backward(&cache, &[1.0]).is_err());
    }

    #[test]
    fn duplicated_sample_doubles_its_contribution() {
        let cfg = ChannelConfig::of(ConfigKind::Original);
        let m = CnnModel::<f64>::build(cfg, micro_arch(8, 6), 8).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let a = random_input(&cfg, 8, 6, &mut rng);
        let b = random_input(&cfg, 8, 6, &mut rng);
        let c = random_input(&cfg, 8, 6, &mut rng);
        // Batch size 3 in both cases.
        let (_, g_abc) = m.mse_and_gradients(&[&a, &b, &c]).unwrap();
        let (_, g_aac) = m.mse_and_gradients(&[&a, &a, &c]).unwrap();
        let (_, g_a) = m.mse_and_gradients(&[&a]).unwrap();
        // Per-sample contributions: g(x) / 3.
        let ga: Vec<f64> = g_a.to_f64_vec().iter().map(|v| v / 3.0).collect();
        let gb: Vec<f64> = {
            let (_, g_b) = m.mse_and_gradients(&[&b]).unwrap();
            g_b.to_f64_vec().iter().map(|v| v / 3.0).collect()
        };
        for (((abc, aac), a1), b1) in g_abc.to_f64_vec().iter().zip(g_aac.to_f64_vec()).zip(&ga).zip(&gb) {
            // aac - abc = a - b contribution.
            assert!(((aac - abc) - (a1 - b1)).abs() < 1e-9);
        }
    }
}
