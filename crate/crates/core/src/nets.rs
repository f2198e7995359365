//! Small fully connected networks with hand-written reverse mode.
//!
//! Parameters live in one flat vector. Layer `l` stores its weights row-major
//! (`out × in`) followed by its biases.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::codec::{ByteReader, ByteWriter};
use crate::error::{check_len, FmxError, Result};
use crate::prior::{EncoderOutput, LN_2PI};

pub const STD_MIN: f64 = 0.001;
pub const STD_MAX: f64 = 0.4;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Identity,
    Tanh,
}

impl Activation {
    fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Identity => x,
            Activation::Tanh => x.tanh(),
        }
    }

    /// Derivative expressed through the activation's output.
    fn derivative_from_output(self, y: f64) -> f64 {
        match self {
            Activation::Identity => 1.0,
            Activation::Tanh => 1.0 - y * y,
        }
    }

    fn code(self) -> u8 {
        match self {
            Activation::Identity => 0,
            Activation::Tanh => 1,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Architecture {
    /// Layer widths, input first.
    pub sizes: Vec<usize>,
    /// One activation per layer (`sizes.len() - 1` entries).
    pub activations: Vec<Activation>,
}

impl Architecture {
    pub fn affine(input: usize, output: usize) -> Self {
        Self {
            sizes: vec![input, output],
            activations: vec![Activation::Identity],
        }
    }

    pub fn tanh_hidden(input: usize, hidden: usize, output: usize) -> Self {
        Self {
            sizes: vec![input, hidden, output],
            activations: vec![Activation::Tanh, Activation::Identity],
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.sizes.len() < 2 || self.sizes.contains(&0) {
            return Err(FmxError::Config(format!(
                "architecture needs at least two positive layer sizes, got {:?}",
                self.sizes
            )));
        }
        check_len(
            "activations per layer",
            self.sizes.len() - 1,
            self.activations.len(),
        )
    }

    pub fn input_size(&self) -> usize {
        self.sizes[0]
    }

    pub fn output_size(&self) -> usize {
        *self.sizes.last().expect("validated architecture")
    }

    pub fn param_count(&self) -> usize {
        self.sizes.windows(2).map(|w| w[0] * w[1] + w[1]).sum()
    }
}

/// Network weights and biases (θ for the decoder, φ for the encoder).
#[derive(Clone, Debug, PartialEq)]
pub struct Network {
    arch: Architecture,
    params: Vec<f64>,
}

/// Gradient aligned one-to-one with a [`Network`]'s parameter vector.
#[derive(Clone, Debug, PartialEq)]
pub struct GradientBuffer {
    pub values: Vec<f64>,
}

impl GradientBuffer {
    pub fn zeros(len: usize) -> Self {
        Self {
            values: vec![0.0; len],
        }
    }

    pub fn add(&mut self, other: &GradientBuffer) {
        for (a, b) in self.values.iter_mut().zip(&other.values) {
            *a += b;
        }
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }
}

/// Layer outputs of one forward pass (`outputs[0]` is the input).
#[derive(Clone, Debug)]
pub struct ForwardCache {
    outputs: Vec<Vec<f64>>,
}

impl ForwardCache {
    pub fn output(&self) -> &[f64] {
        self.outputs.last().expect("forward cache holds the input")
    }
}

impl Network {
    pub fn from_params(arch: Architecture, params: Vec<f64>) -> Result<Self> {
        arch.validate()?;
        check_len("network parameters", arch.param_count(), params.len())?;
        if params.iter().any(|p| !p.is_finite()) {
            return Err(FmxError::Numeric("non-finite network parameter".into()));
        }
        Ok(Self { arch, params })
    }

    pub fn zeros(arch: Architecture) -> Result<Self> {
        let n = arch.param_count();
        Self::from_params(arch, vec![0.0; n])
    }

    /// Weights uniform in `±1/√fan_in`, biases zero.
    pub fn init<R: Rng + ?Sized>(arch: Architecture, rng: &mut R) -> Result<Self> {
        arch.validate()?;
        let mut params = Vec::with_capacity(arch.param_count());
        for w in arch.sizes.windows(2) {
            let bound = 1.0 / (w[0] as f64).sqrt();
            for _ in 0..w[0] * w[1] {
                params.push(rng.random_range(-bound..bound));
            }
            params.extend(std::iter::repeat_n(0.0, w[1]));
        }
        Self::from_params(arch, params)
    }

    pub fn arch(&self) -> &Architecture {
        &self.arch
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    pub fn zero_grad(&self) -> GradientBuffer {
        GradientBuffer::zeros(self.params.len())
    }

    pub fn forward(&self, x: &[f64]) -> Result<Vec<f64>> {
        Ok(self.forward_cached(x)?.outputs.pop().expect("nonempty"))
    }

    pub fn forward_cached(&self, x: &[f64]) -> Result<ForwardCache> {
        check_len("network input", self.arch.input_size(), x.len())?;
        let mut outputs = Vec::with_capacity(self.arch.sizes.len());
        outputs.push(x.to_vec());
        let mut offset = 0;
        for (l, w) in self.arch.sizes.windows(2).enumerate() {
            let (n_in, n_out) = (w[0], w[1]);
            let act = self.arch.activations[l];
            let weights = &self.params[offset..offset + n_in * n_out];
            let bias = &self.params[offset + n_in * n_out..offset + n_in * n_out + n_out];
            let input = outputs.last().expect("nonempty");
            let out: Vec<f64> = (0..n_out)
                .map(|o| {
                    let row = &weights[o * n_in..(o + 1) * n_in];
                    let pre = row.iter().zip(input).map(|(a, b)| a * b).sum::<f64>() + bias[o];
                    act.apply(pre)
                })
                .collect();
            outputs.push(out);
            offset += n_in * n_out + n_out;
        }
        Ok(ForwardCache { outputs })
    }

    /// Accumulates `∂loss/∂params` into `grad` given `∂loss/∂output`; returns `∂loss/∂input`.
    pub fn backward(
        &self,
        cache: &ForwardCache,
        output_adjoint: &[f64],
        grad: &mut GradientBuffer,
    ) -> Result<Vec<f64>> {
        check_len(
            "forward cache layers",
            self.arch.sizes.len(),
            cache.outputs.len(),
        )?;
        for (l, &size) in self.arch.sizes.iter().enumerate() {
            check_len("forward cache layer width", size, cache.outputs[l].len())?;
        }
        check_len(
            "output adjoint",
            self.arch.output_size(),
            output_adjoint.len(),
        )?;
        check_len("gradient buffer", self.params.len(), grad.values.len())?;

        let mut adjoint = output_adjoint.to_vec();
        let mut offset = self.params.len();
        for l in (0..self.arch.activations.len()).rev() {
            let (n_in, n_out) = (self.arch.sizes[l], self.arch.sizes[l + 1]);
            offset -= n_in * n_out + n_out;
            let act = self.arch.activations[l];
            let out = &cache.outputs[l + 1];
            let input = &cache.outputs[l];
            let delta: Vec<f64> = adjoint
                .iter()
                .zip(out)
                .map(|(&a, &y)| a * act.derivative_from_output(y))
                .collect();
            let mut input_adjoint = vec![0.0; n_in];
            for o in 0..n_out {
                let row = offset + o * n_in;
                let dlt = delta[o];
                for c in 0..n_in {
                    grad.values[row + c] += dlt * input[c];
                    input_adjoint[c] += self.params[row + c] * dlt;
                }
                grad.values[offset + n_in * n_out + o] += dlt;
            }
            adjoint = input_adjoint;
        }
        Ok(adjoint)
    }

    pub fn encode(&self, w: &mut ByteWriter) {
        w.u32(self.arch.sizes.len() as u32);
        for &s in &self.arch.sizes {
            w.u64(s as u64);
        }
        for a in &self.arch.activations {
            w.u8(a.code());
        }
        w.f64_vec(&self.params);
    }

    pub fn decode(r: &mut ByteReader<'_>) -> Result<Self> {
        let layers = r.u32("layer count")? as usize;
        if !(2..=64).contains(&layers) {
            return Err(r.error(format!("implausible layer count {layers}")));
        }
        let mut sizes = Vec::with_capacity(layers);
        for _ in 0..layers {
            let s = r.u64("layer size")?;
            sizes.push(usize::try_from(s).map_err(|_| r.error("layer size overflows"))?);
        }
        let mut activations = Vec::with_capacity(layers - 1);
        for _ in 0..layers - 1 {
            activations.push(match r.u8("activation")? {
                0 => Activation::Identity,
                1 => Activation::Tanh,
                other => return Err(r.error(format!("unknown activation code {other}"))),
            });
        }
        let arch = Architecture { sizes, activations };
        arch.validate()?;
        let params = r.f64_vec("network parameters")?;
        Self::from_params(arch, params)
    }
}

/// Encoder forward pass: first `D·I` outputs are means, the rest log-variances.
pub fn encode(x: &[f64], phi: &Network) -> Result<EncoderOutput> {
    EncoderOutput::from_raw(&phi.forward(x)?)
}

/// `z = μ + exp(½ log σ²) ⊙ ε`.
pub fn reparam_sample(enc: &EncoderOutput, eps: &[f64]) -> Result<Vec<f64>> {
    check_len("reparameterization noise", enc.len(), eps.len())?;
    Ok((0..enc.len())
        .map(|j| enc.mu()[j] + (0.5 * enc.clamped_log_var(j)).exp() * eps[j])
        .collect())
}

/// Pulls `∂/∂z` back through [`reparam_sample`] onto `(∂/∂μ, ∂/∂log σ²)`, adding into the outputs.
pub fn reparam_backward(
    enc: &EncoderOutput,
    eps: &[f64],
    dz: &[f64],
    d_mu: &mut [f64],
    d_log_var: &mut [f64],
) {
    for j in 0..enc.len() {
        d_mu[j] += dz[j];
        if enc.log_var_active(j) {
            d_log_var[j] += dz[j] * eps[j] * 0.5 * (0.5 * enc.clamped_log_var(j)).exp();
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Likelihood {
    Bernoulli,
    Gaussian,
}

impl Likelihood {
    /// Decoder output width for `pixels` observed values.
    pub fn decoder_outputs(self, pixels: usize) -> usize {
        match self {
            Likelihood::Bernoulli => pixels,
            Likelihood::Gaussian => 2 * pixels,
        }
    }

    fn code(self) -> u8 {
        match self {
            Likelihood::Bernoulli => 0,
            Likelihood::Gaussian => 1,
        }
    }

    fn from_code(code: u8) -> Option<Self> {
        match code {
            0 => Some(Likelihood::Bernoulli),
            1 => Some(Likelihood::Gaussian),
            _ => None,
        }
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

pub fn decode_bernoulli(z: &[f64], theta: &Network) -> Result<Vec<f64>> {
    theta.forward(z)
}

/// `Σ_p [x_p log σ(l_p) + (1 − x_p) log(1 − σ(l_p))]` in the form `x·l − softplus(l)`.
pub fn log_lik_bernoulli(x: &[f64], logits: &[f64]) -> Result<f64> {
    check_len("Bernoulli logits", x.len(), logits.len())?;
    let mut total = 0.0;
    for (p, (&xp, &l)) in x.iter().zip(logits).enumerate() {
        if xp != 0.0 && xp != 1.0 {
            return Err(FmxError::Domain(format!(
                "Bernoulli observation {p} must be 0 or 1, got {xp}"
            )));
        }
        total += xp * l - softplus(l);
    }
    Ok(total)
}

/// `∂ log p / ∂ logits = x − σ(l)`.
pub fn log_lik_bernoulli_grad(x: &[f64], logits: &[f64]) -> Vec<f64> {
    x.iter()
        .zip(logits)
        .map(|(&xp, &l)| xp - sigmoid(l))
        .collect()
}

/// Splits the decoder output into means and standard deviations squashed into `[0.001, 0.4]`.
pub fn decode_gaussian(z: &[f64], theta: &Network) -> Result<(Vec<f64>, Vec<f64>)> {
    let raw = theta.forward(z)?;
    gaussian_head(&raw)
}

pub(crate) fn gaussian_head(raw: &[f64]) -> Result<(Vec<f64>, Vec<f64>)> {
    if !raw.len().is_multiple_of(2) {
        return Err(FmxError::Shape {
            what: "Gaussian decoder output (must be even)",
            expected: raw.len() + 1,
            actual: raw.len(),
        });
    }
    let p = raw.len() / 2;
    let mean = raw[..p].to_vec();
    let std = raw[p..]
        .iter()
        .map(|&r| STD_MIN + (STD_MAX - STD_MIN) * sigmoid(r))
        .collect();
    Ok((mean, std))
}

pub fn log_lik_gaussian(x: &[f64], mean: &[f64], std: &[f64]) -> Result<f64> {
    check_len("Gaussian mean", x.len(), mean.len())?;
    check_len("Gaussian std", x.len(), std.len())?;
    Ok(x.iter()
        .zip(mean)
        .zip(std)
        .map(|((&xp, &m), &s)| {
            let r = (xp - m) / s;
            -0.5 * r * r - s.ln() - 0.5 * LN_2PI
        })
        .sum())
}

/// `∂ log p / ∂ raw` for the Gaussian head: means first, then raw std logits.
pub(crate) fn log_lik_gaussian_raw_grad(x: &[f64], raw: &[f64]) -> Vec<f64> {
    let p = x.len();
    let mut out = vec![0.0; 2 * p];
    for j in 0..p {
        let sg = sigmoid(raw[p + j]);
        let s = STD_MIN + (STD_MAX - STD_MIN) * sg;
        let diff = x[j] - raw[j];
        out[j] = diff / (s * s);
        let d_std = diff * diff / (s * s * s) - 1.0 / s;
        out[p + j] = d_std * (STD_MAX - STD_MIN) * sg * (1.0 - sg);
    }
    out
}

/// Encoder, decoder and the observation model.
#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    pub encoder: Network,
    pub decoder: Network,
    pub likelihood: Likelihood,
}

impl Model {
    pub fn new(encoder: Network, decoder: Network, likelihood: Likelihood) -> Result<Self> {
        let latent2 = encoder.arch().output_size();
        if !latent2.is_multiple_of(2) {
            return Err(FmxError::Config(format!(
                "encoder output size {latent2} must be 2·D·I"
            )));
        }
        check_len(
            "decoder input (latent size)",
            latent2 / 2,
            decoder.arch().input_size(),
        )?;
        let pixels = encoder.arch().input_size();
        check_len(
            "decoder output size",
            likelihood.decoder_outputs(pixels),
            decoder.arch().output_size(),
        )?;
        Ok(Self {
            encoder,
            decoder,
            likelihood,
        })
    }

    pub fn latent_dim(&self) -> usize {
        self.encoder.arch().output_size() / 2
    }

    pub fn data_dim(&self) -> usize {
        self.encoder.arch().input_size()
    }

    pub fn encode_x(&self, x: &[f64]) -> Result<EncoderOutput> {
        encode(x, &self.encoder)
    }

    /// `log p(x | z)` for the model's observation model.
    pub fn log_lik(&self, x: &[f64], z: &[f64]) -> Result<f64> {
        let raw = self.decoder.forward(z)?;
        self.log_lik_raw(x, &raw)
    }

    pub(crate) fn log_lik_raw(&self, x: &[f64], raw: &[f64]) -> Result<f64> {
        match self.likelihood {
            Likelihood::Bernoulli => log_lik_bernoulli(x, raw),
            Likelihood::Gaussian => {
                let (mean, std) = gaussian_head(raw)?;
                log_lik_gaussian(x, &mean, &std)
            }
        }
    }

    pub(crate) fn log_lik_raw_grad(&self, x: &[f64], raw: &[f64]) -> Vec<f64> {
        match self.likelihood {
            Likelihood::Bernoulli => log_lik_bernoulli_grad(x, raw),
            Likelihood::Gaussian => log_lik_gaussian_raw_grad(x, raw),
        }
    }

    /// Decoder mean: Bernoulli probabilities or Gaussian means.
    pub fn decode_mean(&self, z: &[f64]) -> Result<Vec<f64>> {
        let raw = self.decoder.forward(z)?;
        Ok(match self.likelihood {
            Likelihood::Bernoulli => raw.into_iter().map(sigmoid).collect(),
            Likelihood::Gaussian => gaussian_head(&raw)?.0,
        })
    }

    pub fn encode_bytes(&self, w: &mut ByteWriter) {
        w.u8(self.likelihood.code());
        self.encoder.encode(w);
        self.decoder.encode(w);
    }

    pub fn decode_bytes(r: &mut ByteReader<'_>) -> Result<Self> {
        let code = r.u8("likelihood")?;
        let likelihood = Likelihood::from_code(code)
            .ok_or_else(|| r.error(format!("unknown likelihood code {code}")))?;
        let encoder = Network::decode(r)?;
        let decoder = Network::decode(r)?;
        Self::new(encoder, decoder, likelihood)
    }
}

/// Central-difference gradient check over selected parameter indices.
///
/// Returns the largest relative error `|fd − g| / max(|fd|, |g|, floor)`.
pub fn finite_difference_check<F>(
    params: &[f64],
    analytic: &[f64],
    indices: &[usize],
    h: f64,
    floor: f64,
    mut objective: F,
) -> f64
where
    F: FnMut(&[f64]) -> f64,
{
    let mut work = params.to_vec();
    let mut worst: f64 = 0.0;
    for &j in indices {
        let orig = work[j];
        work[j] = orig + h;
        let up = objective(&work);
        work[j] = orig - h;
        let down = objective(&work);
        work[j] = orig;
        let fd = (up - down) / (2.0 * h);
        let g = analytic[j];
        let rel = (fd - g).abs() / fd.abs().max(g.abs()).max(floor);
        worst = worst.max(rel);
    }
    worst
}
