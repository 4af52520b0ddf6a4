//! The differentiable acquisition pipeline and the k-space gradient used by GEO.
//!
//! The forward pass is recorded on a [`Tape`]: measured k-space (real and
//! imaginary parts) → inverse FFT → per-channel standardization → patch
//! encoder → quantizer → latent transformer → logits for both streams.

use ndarray::Array2;
use num_complex::Complex64;

use crate::error::{Error, Result};
use crate::kspace::{ComplexImage, KSpace};
use crate::model::{LatentModel, Stream, TokenDistribution};
use crate::tape::{Op, Tape, ValueId};
use crate::tokenizer::{ChannelStats, LatentGrid, TokenIndices, Tokenizer};

/// How the quantizer appears on the tape.
#[derive(Clone, Debug)]
pub enum QuantMode {
    /// Nearest-codebook snap with a straight-through backward rule.
    StraightThrough,
    /// Adds fixed offsets (one per stream) to the continuous latents. With
    /// offsets `q − z` taken at a reference point this reproduces the snap
    /// there while keeping the assignment frozen under perturbation.
    Frozen([Array2<f64>; 2]),
}

/// A recorded forward pass of the full pipeline for one measurement.
pub struct PipelineState<'a> {
    tape: Tape<'a>,
    height: usize,
    width: usize,
    grid: (usize, usize),
    inputs: [ValueId; 2],
    latents: [ValueId; 2],
    snapped: [ValueId; 2],
    logits: [ValueId; 2],
    stats: [ChannelStats; 2],
    tokens: Option<[TokenIndices; 2]>,
    loss: Option<ValueId>,
}

fn split(ksp: &KSpace) -> (Array2<f64>, Array2<f64>) {
    let (h, w) = (ksp.height(), ksp.width());
    (
        Array2::from_shape_vec((h, w), ksp.real_part()).unwrap(),
        Array2::from_shape_vec((h, w), ksp.imag_part()).unwrap(),
    )
}

/// Records the pipeline on a fresh tape.
pub fn forward_pipeline<'a>(
    model: &'a LatentModel,
    tokenizer: &'a Tokenizer,
    y: &KSpace,
    mode: QuantMode,
) -> Result<PipelineState<'a>> {
    if !y.is_finite() {
        return Err(Error::InvalidInput("k-space contains non-finite values".into()));
    }
    let p = tokenizer.patch_size();
    let (h, w) = (y.height(), y.width());
    crate::tokenizer::check_geometry(h, w, p)?;
    let mut tape = Tape::new(model.context(Some(tokenizer)));
    let (re, im) = split(y);
    let inputs = [tape.leaf(re), tape.leaf(im)];
    let (x_re, x_im) = tape.inverse_fft(inputs[0], inputs[1])?;
    let (n_re, s_re) = tape.channel_norm(x_re)?;
    let (n_im, s_im) = tape.channel_norm(x_im)?;
    let latents = [tape.apply1(Op::PatchEncode, &[n_re])?, tape.apply1(Op::PatchEncode, &[n_im])?];
    let (snapped, tokens) = match mode {
        QuantMode::StraightThrough => {
            let (q_re, i_re) = tape.quantize(latents[0])?;
            let (q_im, i_im) = tape.quantize(latents[1])?;
            ([q_re, q_im], Some([TokenIndices(i_re), TokenIndices(i_im)]))
        }
        QuantMode::Frozen([o_re, o_im]) => (
            [
                tape.apply1(Op::Offset(o_re), &[latents[0]])?,
                tape.apply1(Op::Offset(o_im), &[latents[1]])?,
            ],
            None,
        ),
    };
    let logits = model.record(&mut tape, snapped[0], snapped[1]).map(|(a, b)| [a, b])?;
    Ok(PipelineState {
        tape,
        height: h,
        width: w,
        grid: (h / p, w / p),
        inputs,
        latents,
        snapped,
        logits,
        stats: [s_re, s_im],
        tokens,
        loss: None,
    })
}

impl<'a> PipelineState<'a> {
    pub fn distributions(&self) -> Result<(TokenDistribution, TokenDistribution)> {
        let (gh, gw) = self.grid;
        Ok((
            TokenDistribution::from_logits(Stream::Re, gh, gw, self.tape.value(self.logits[0]).clone())?,
            TokenDistribution::from_logits(Stream::Im, gh, gw, self.tape.value(self.logits[1]).clone())?,
        ))
    }

    /// Per-channel statistics of the zero-filled input, used to undo normalization.
    pub fn stats(&self) -> [ChannelStats; 2] {
        self.stats
    }

    /// Token indices of the input (straight-through mode only).
    pub fn input_tokens(&self) -> Option<&[TokenIndices; 2]> {
        self.tokens.as_ref()
    }

    /// Snapped latents of both input channels.
    pub fn input_latents(&self) -> Result<[LatentGrid; 2]> {
        let (gh, gw) = self.grid;
        Ok([
            LatentGrid::new(gh, gw, self.tape.value(self.snapped[0]).clone())?,
            LatentGrid::new(gh, gw, self.tape.value(self.snapped[1]).clone())?,
        ])
    }

    /// Offsets that freeze the current quantizer assignment (see [`QuantMode::Frozen`]).
    pub fn freeze_offsets(&self) -> [Array2<f64>; 2] {
        [0, 1].map(|s| self.tape.value(self.snapped[s]) - self.tape.value(self.latents[s]))
    }

    /// Records the total entropy of both streams and returns its value.
    pub fn entropy_loss(&mut self) -> Result<f64> {
        let loss = match self.loss {
            Some(l) => l,
            None => {
                let e_re = self.tape.apply1(Op::Entropy, &[self.logits[0]])?;
                let e_im = self.tape.apply1(Op::Entropy, &[self.logits[1]])?;
                let l = self.tape.apply1(Op::Add, &[e_re, e_im])?;
                self.loss = Some(l);
                l
            }
        };
        Ok(self.tape.scalar(loss))
    }

    /// Re-executes the tape and checks it reproduces every recorded value.
    pub fn replay(&self) -> Result<()> {
        self.tape.replay()
    }

    pub fn tape(&self) -> &Tape<'a> {
        &self.tape
    }
}

/// Sum over positions of the Shannon entropy (nats) of both streams.
pub fn total_entropy_loss(dist_re: &TokenDistribution, dist_im: &TokenDistribution) -> f64 {
    dist_re.entropies().iter().sum::<f64>() + dist_im.entropies().iter().sum::<f64>()
}

/// Gradient of a scalar loss with respect to the measured k-space.
#[derive(Clone, Debug, PartialEq)]
pub struct KSpaceGradient {
    /// `∂L/∂Re(y) + i·∂L/∂Im(y)` at every k-space position.
    pub complex: KSpace,
    /// Element-wise modulus of `complex`, `H×W`.
    pub magnitude: Array2<f64>,
}

impl KSpaceGradient {
    pub fn from_parts(g_re: &Array2<f64>, g_im: &Array2<f64>) -> Result<Self> {
        let (h, w) = g_re.dim();
        let data: Vec<Complex64> = g_re.iter().zip(g_im.iter()).map(|(&a, &b)| Complex64::new(a, b)).collect();
        let magnitude = Array2::from_shape_vec((h, w), data.iter().map(|z| z.norm()).collect()).unwrap();
        if !magnitude.iter().all(|v| v.is_finite()) {
            return Err(Error::Internal("k-space gradient is not finite".into()));
        }
        Ok(Self {
            complex: KSpace::new(h, w, data)?,
            magnitude,
        })
    }
}

/// Reverse sweep from the recorded entropy loss to the input k-space.
pub fn backward_to_kspace(state: &mut PipelineState<'_>) -> Result<KSpaceGradient> {
    backward_scaled(state, 1.0)
}

/// As [`backward_to_kspace`] with the loss multiplied by `scale`.
pub fn backward_scaled(state: &mut PipelineState<'_>, scale: f64) -> Result<KSpaceGradient> {
    if state.tokens.is_some() && !state.tape.has_ste_marker() {
        return Err(Error::Internal("quantization node is missing from the tape".into()));
    }
    state.entropy_loss()?;
    let loss = state.loss.ok_or_else(|| Error::Internal("no loss recorded".into()))?;
    let grads = state.tape.backward(&[(loss, Array2::from_elem((1, 1), scale))])?;
    let shape = (state.height, state.width);
    let g_re = grads.get_or_zeros(state.inputs[0], shape);
    let g_im = grads.get_or_zeros(state.inputs[1], shape);
    KSpaceGradient::from_parts(&g_re, &g_im)
}

/// Per phase-encoding line (row), the sum of the magnitude map along the readout axis.
pub fn line_gradient_scores(g: &Array2<f64>) -> Vec<f64> {
    g.rows().into_iter().map(|r| r.sum()).collect()
}

/// Complex image from a k-space gradient's magnitude, for debug dumps.
pub fn magnitude_image(g: &KSpaceGradient) -> ComplexImage {
    let (h, w) = g.magnitude.dim();
    ComplexImage::from_real(h, w, g.magnitude.as_slice().unwrap()).unwrap()
}
