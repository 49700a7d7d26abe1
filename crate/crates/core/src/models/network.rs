//! Forward and backward passes of the convolutional autoencoder.
//!
//! Activations are kept per sample as `[channel][position]` matrices, where a position is
//! one voxel of the `(depth, height, width)` volume. Convolutions use unit stride and same
//! padding and are lowered to GEMM through an im2col table.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{AutoencoderSpec, ModelKind};
use crate::error::Result;
use crate::scalar::Scalar;

const NO_SOURCE: u32 = u32::MAX;

/// Spatial layout shared by every convolution of one model.
#[derive(Debug, Clone)]
pub struct Geometry {
    pub depth: usize,
    pub height: usize,
    pub width: usize,
    pub kernel: (usize, usize, usize),
    /// `src[tap * positions + p]`: input position read by output position `p` at kernel tap
    /// `tap`, or `NO_SOURCE` in the zero padding.
    src: Vec<u32>,
}

impl Geometry {
    pub fn new(depth: usize, height: usize, width: usize, kernel: (usize, usize, usize)) -> Self {
        let (kd, kh, kw) = kernel;
        let positions = depth * height * width;
        let mut src = Vec::with_capacity(kd * kh * kw * positions);
        for a in 0..kd {
            for b in 0..kh {
                for c in 0..kw {
                    for d in 0..depth {
                        for h in 0..height {
                            for w in 0..width {
                                let sd = d as isize + a as isize - (kd / 2) as isize;
                                let sh = h as isize + b as isize - (kh / 2) as isize;
                                let sw = w as isize + c as isize - (kw / 2) as isize;
                                let inside = (0..depth as isize).contains(&sd)
                                    && (0..height as isize).contains(&sh)
                                    && (0..width as isize).contains(&sw);
                                src.push(if inside {
                                    ((sd as usize * height + sh as usize) * width + sw as usize)
                                        as u32
                                } else {
                                    NO_SOURCE
                                });
                            }
                        }
                    }
                }
            }
        }
        Geometry {
            depth,
            height,
            width,
            kernel,
            src,
        }
    }

    pub fn positions(&self) -> usize {
        self.depth * self.height * self.width
    }

    pub fn taps(&self) -> usize {
        self.kernel.0 * self.kernel.1 * self.kernel.2
    }

    /// `cols[(ch * taps + tap) * P + p] = x[ch * P + src]`, zero in the padding.
    fn im2col<T: Scalar>(&self, x: &[T], channels: usize, cols: &mut [T]) {
        let p_len = self.positions();
        let taps = self.taps();
        for ch in 0..channels {
            let plane = &x[ch * p_len..(ch + 1) * p_len];
            for tap in 0..taps {
                let dst = &mut cols[(ch * taps + tap) * p_len..(ch * taps + tap + 1) * p_len];
                let idx = &self.src[tap * p_len..(tap + 1) * p_len];
                for (d, &s) in dst.iter_mut().zip(idx) {
                    *d = if s == NO_SOURCE { T::zero() } else { plane[s as usize] };
                }
            }
        }
    }

    /// Adjoint of [`Geometry::im2col`]: scatters `cols` back, accumulating into `x`.
    fn col2im_add<T: Scalar>(&self, cols: &[T], channels: usize, x: &mut [T]) {
        let p_len = self.positions();
        let taps = self.taps();
        for ch in 0..channels {
            let plane = &mut x[ch * p_len..(ch + 1) * p_len];
            for tap in 0..taps {
                let srcv = &cols[(ch * taps + tap) * p_len..(ch * taps + tap + 1) * p_len];
                let idx = &self.src[tap * p_len..(tap + 1) * p_len];
                for (&v, &s) in srcv.iter().zip(idx) {
                    if s != NO_SOURCE {
                        plane[s as usize] += v;
                    }
                }
            }
        }
    }
}

/// A weight matrix (`rows x cols`, row-major) plus a bias vector inside the flat parameter
/// buffer.
#[derive(Debug, Clone, Copy)]
struct Block {
    w: usize,
    rows: usize,
    cols: usize,
    b: usize,
    bias_len: usize,
}

impl Block {
    fn end(&self) -> usize {
        self.b + self.bias_len
    }
}

#[derive(Debug, Clone)]
struct Layout {
    /// Channel counts `[in, w0, w1, ...]`.
    channels: Vec<usize>,
    /// `channels[i] -> channels[i+1]`, weight `(out, in * taps)`.
    enc_convs: Vec<Block>,
    enc_fc: Block,
    dec_fc: Block,
    /// Index `i` maps `channels[i+1] -> channels[i]`, weight `(in, out * taps)`.
    dec_convs: Vec<Block>,
    total: usize,
}

impl Layout {
    fn new(channels: Vec<usize>, taps: usize, positions: usize, latent: usize) -> Self {
        let mut offset = 0;
        let mut block = |rows: usize, cols: usize, bias_len: usize| {
            let b = Block {
                w: offset,
                rows,
                cols,
                b: offset + rows * cols,
                bias_len,
            };
            offset = b.end();
            b
        };
        let layers = channels.len() - 1;
        let enc_convs: Vec<Block> = (0..layers)
            .map(|i| block(channels[i + 1], channels[i] * taps, channels[i + 1]))
            .collect();
        let flat = channels[layers] * positions;
        let enc_fc = block(latent, flat, latent);
        let dec_fc = block(flat, latent, flat);
        let mut dec_convs: Vec<Option<Block>> = vec![None; layers];
        for i in (0..layers).rev() {
            dec_convs[i] = Some(block(channels[i + 1], channels[i] * taps, channels[i]));
        }
        Layout {
            channels,
            enc_convs,
            enc_fc,
            dec_fc,
            dec_convs: dec_convs.into_iter().map(Option::unwrap).collect(),
            total: offset,
        }
    }
}

/// Per-sample scratch buffers.
#[derive(Debug, Clone)]
pub struct Workspace<T> {
    /// `enc[0]` is the model input, `enc[i + 1]` the output of encoder conv `i`.
    enc: Vec<Vec<T>>,
    cols: Vec<Vec<T>>,
    pub latent: Vec<T>,
    hidden: Vec<T>,
    /// `dec[i]` is the output of decoder conv `i`; `dec[0]` is the reconstruction.
    dec: Vec<Vec<T>>,
    scratch: Vec<T>,
    grad: Vec<T>,
    grad_in: Vec<T>,
    grad_latent: Vec<T>,
}

/// Convolutional autoencoder with parameters of type `T`.
#[derive(Debug, Clone)]
pub struct Autoencoder<T> {
    pub spec: AutoencoderSpec,
    pub geometry: Geometry,
    layout: Layout,
    pub params: Vec<T>,
}

fn relu_in_place<T: Scalar>(v: &mut [T]) {
    for x in v {
        if *x < T::zero() {
            *x = T::zero();
        }
    }
}

fn mask_by_active<T: Scalar>(grad: &mut [T], activation: &[T]) {
    for (g, &a) in grad.iter_mut().zip(activation) {
        if a <= T::zero() {
            *g = T::zero();
        }
    }
}

fn broadcast_bias<T: Scalar>(out: &mut [T], bias: &[T], positions: usize) {
    for (row, &b) in out.chunks_exact_mut(positions).zip(bias) {
        row.fill(b);
    }
}

fn add_row_sums<T: Scalar>(acc: &mut [T], grad: &[T], positions: usize) {
    for (a, row) in acc.iter_mut().zip(grad.chunks_exact(positions)) {
        *a += row.iter().copied().sum::<T>();
    }
}

impl<T: Scalar> Autoencoder<T> {
    /// Builds the model with parameters drawn deterministically from `seed`.
    pub fn new(spec: &AutoencoderSpec, seed: u64) -> Result<Self> {
        spec.validate()?;
        let geometry = match spec.kind {
            ModelKind::Ae3d => Geometry::new(spec.timepoints, spec.height, spec.width, (3, 3, 3)),
            ModelKind::Ae2d => Geometry::new(1, spec.height, spec.width, (1, 3, 3)),
        };
        let mut channels = vec![spec.in_channels];
        channels.extend_from_slice(&spec.conv_widths);
        let layout = Layout::new(
            channels,
            geometry.taps(),
            geometry.positions(),
            spec.latent_dim,
        );
        let mut params = vec![T::zero(); layout.total];
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let layers = layout.enc_convs.len();
        let taps = geometry.taps();
        let mut init = |block: &Block, fan_in: usize, gain: f64| {
            let bound = (gain / fan_in as f64).sqrt();
            for w in &mut params[block.w..block.b] {
                *w = T::from_f64_lossy(rng.random_range(-bound..bound));
            }
        };
        for b in &layout.enc_convs {
            init(b, b.cols, 6.0);
        }
        init(&layout.enc_fc, layout.enc_fc.cols, 3.0);
        init(&layout.dec_fc, layout.dec_fc.cols, 6.0);
        for i in (0..layers).rev() {
            let b = &layout.dec_convs[i];
            let gain = if i == 0 { 3.0 } else { 6.0 };
            init(b, b.rows * taps, gain);
        }
        Ok(Autoencoder {
            spec: spec.clone(),
            geometry,
            layout,
            params,
        })
    }

    pub fn from_params(spec: &AutoencoderSpec, params: Vec<T>) -> Result<Self> {
        let mut model = Self::new(spec, 0)?;
        if params.len() != model.params.len() {
            return Err(crate::error::Error::ShapeMismatch(format!(
                "checkpoint holds {} parameters, model needs {}",
                params.len(),
                model.params.len()
            )));
        }
        model.params = params;
        Ok(model)
    }

    pub fn num_params(&self) -> usize {
        self.params.len()
    }

    /// Elements of one input (and output) tensor.
    pub fn input_len(&self) -> usize {
        self.spec.in_channels * self.geometry.positions()
    }

    pub fn workspace(&self) -> Workspace<T> {
        let p = self.geometry.positions();
        let taps = self.geometry.taps();
        let ch = &self.layout.channels;
        let layers = ch.len() - 1;
        let flat = ch[layers] * p;
        let max_ch = *ch.iter().max().unwrap();
        Workspace {
            enc: ch.iter().map(|&c| vec![T::zero(); c * p]).collect(),
            cols: (0..layers).map(|i| vec![T::zero(); ch[i] * taps * p]).collect(),
            latent: vec![T::zero(); self.spec.latent_dim],
            hidden: vec![T::zero(); flat],
            dec: (0..layers).map(|i| vec![T::zero(); ch[i] * p]).collect(),
            scratch: vec![T::zero(); max_ch * taps * p],
            grad: vec![T::zero(); max_ch * p],
            grad_in: vec![T::zero(); max_ch * p],
            grad_latent: vec![T::zero(); self.spec.latent_dim],
        }
    }

    /// Runs the encoder on `input`; the latent vector is left in `ws.latent`.
    pub fn encode_into(&self, input: &[T], ws: &mut Workspace<T>) {
        let p = self.geometry.positions();
        let taps = self.geometry.taps();
        let params = &self.params;
        ws.enc[0].copy_from_slice(input);
        for (i, b) in self.layout.enc_convs.iter().enumerate() {
            let (cin, cout) = (b.cols / taps, b.rows);
            let (head, tail) = ws.enc.split_at_mut(i + 1);
            let (x, y) = (&head[i], &mut tail[0]);
            self.geometry.im2col(x, cin, &mut ws.cols[i]);
            broadcast_bias(y, &params[b.b..b.end()], p);
            T::gemm(
                cout,
                cin * taps,
                p,
                T::one(),
                &params[b.w..b.b],
                (b.cols as isize, 1),
                &ws.cols[i],
                (p as isize, 1),
                T::one(),
                y,
                (p as isize, 1),
            );
            relu_in_place(y);
        }
        let fc = &self.layout.enc_fc;
        let flat = ws.enc.last().unwrap();
        ws.latent.copy_from_slice(&params[fc.b..fc.end()]);
        T::gemm(
            fc.rows,
            fc.cols,
            1,
            T::one(),
            &params[fc.w..fc.b],
            (fc.cols as isize, 1),
            flat,
            (1, 1),
            T::one(),
            &mut ws.latent,
            (1, 1),
        );
    }

    fn decode_from_latent(&self, ws: &mut Workspace<T>) {
        let p = self.geometry.positions();
        let taps = self.geometry.taps();
        let params = &self.params;
        let fc = &self.layout.dec_fc;
        ws.hidden.copy_from_slice(&params[fc.b..fc.end()]);
        T::gemm(
            fc.rows,
            fc.cols,
            1,
            T::one(),
            &params[fc.w..fc.b],
            (fc.cols as isize, 1),
            &ws.latent,
            (1, 1),
            T::one(),
            &mut ws.hidden,
            (1, 1),
        );
        relu_in_place(&mut ws.hidden);
        let layers = self.layout.dec_convs.len();
        for i in (0..layers).rev() {
            let b = &self.layout.dec_convs[i];
            let (cin, cout) = (b.rows, b.cols / taps);
            let (head, tail) = ws.dec.split_at_mut(i + 1);
            let x: &[T] = if i + 1 == layers { &ws.hidden } else { &tail[0] };
            let y = &mut head[i];
            let g = &mut ws.scratch[..cout * taps * p];
            // G = M^T x, then scatter into the output volume.
            T::gemm(
                cout * taps,
                cin,
                p,
                T::one(),
                &params[b.w..b.b],
                (1, b.cols as isize),
                x,
                (p as isize, 1),
                T::zero(),
                g,
                (p as isize, 1),
            );
            broadcast_bias(y, &params[b.b..b.end()], p);
            self.geometry.col2im_add(g, cout, y);
            if i != 0 {
                relu_in_place(y);
            }
        }
    }

    /// Full reconstruction of one input; the result is in [`Workspace::output`].
    pub fn forward(&self, input: &[T], ws: &mut Workspace<T>) {
        self.encode_into(input, ws);
        self.decode_from_latent(ws);
    }

    /// Back-propagates `scale * ||output - target||^2` after [`Autoencoder::forward`],
    /// accumulating parameter gradients into `grads`. Returns `||output - target||^2`.
    pub fn backward(&self, target: &[T], scale: T, ws: &mut Workspace<T>, grads: &mut [T]) -> T {
        let p = self.geometry.positions();
        let taps = self.geometry.taps();
        let params = &self.params;
        let layers = self.layout.dec_convs.len();
        let two = T::one() + T::one();

        let n_out = self.input_len();
        let mut sq = T::zero();
        for ((g, &o), &t) in ws.grad[..n_out].iter_mut().zip(&ws.dec[0]).zip(target) {
            let d = o - t;
            sq += d * d;
            *g = two * scale * d;
        }

        for i in 0..layers {
            let b = self.layout.dec_convs[i];
            let (cin, cout) = (b.rows, b.cols / taps);
            if i != 0 {
                mask_by_active(&mut ws.grad[..cout * p], &ws.dec[i]);
            }
            add_row_sums(&mut grads[b.b..b.end()], &ws.grad[..cout * p], p);
            let dcol = &mut ws.scratch[..cout * taps * p];
            self.geometry.im2col(&ws.grad[..cout * p], cout, dcol);
            let x: &[T] = if i + 1 == layers { &ws.hidden } else { &ws.dec[i + 1] };
            // dM += x dcol^T
            T::gemm(
                cin,
                p,
                cout * taps,
                T::one(),
                x,
                (p as isize, 1),
                dcol,
                (1, p as isize),
                T::one(),
                &mut grads[b.w..b.b],
                (b.cols as isize, 1),
            );
            // dx = M dcol
            T::gemm(
                cin,
                cout * taps,
                p,
                T::one(),
                &params[b.w..b.b],
                (b.cols as isize, 1),
                dcol,
                (p as isize, 1),
                T::zero(),
                &mut ws.grad_in[..cin * p],
                (p as isize, 1),
            );
            std::mem::swap(&mut ws.grad, &mut ws.grad_in);
        }

        let flat = self.layout.dec_fc.rows;
        mask_by_active(&mut ws.grad[..flat], &ws.hidden);
        let fc = self.layout.dec_fc;
        for (a, &g) in grads[fc.b..fc.end()].iter_mut().zip(&ws.grad[..flat]) {
            *a += g;
        }
        T::gemm(
            fc.rows,
            1,
            fc.cols,
            T::one(),
            &ws.grad[..flat],
            (1, 1),
            &ws.latent,
            (fc.cols as isize, 1),
            T::one(),
            &mut grads[fc.w..fc.b],
            (fc.cols as isize, 1),
        );
        T::gemm(
            fc.cols,
            fc.rows,
            1,
            T::one(),
            &params[fc.w..fc.b],
            (1, fc.cols as isize),
            &ws.grad[..flat],
            (1, 1),
            T::zero(),
            &mut ws.grad_latent,
            (1, 1),
        );

        let fc = self.layout.enc_fc;
        for (a, &g) in grads[fc.b..fc.end()].iter_mut().zip(&ws.grad_latent) {
            *a += g;
        }
        T::gemm(
            fc.rows,
            1,
            fc.cols,
            T::one(),
            &ws.grad_latent,
            (1, 1),
            ws.enc.last().unwrap(),
            (fc.cols as isize, 1),
            T::one(),
            &mut grads[fc.w..fc.b],
            (fc.cols as isize, 1),
        );
        T::gemm(
            fc.cols,
            fc.rows,
            1,
            T::one(),
            &params[fc.w..fc.b],
            (1, fc.cols as isize),
            &ws.grad_latent,
            (1, 1),
            T::zero(),
            &mut ws.grad[..flat],
            (1, 1),
        );

        for i in (0..self.layout.enc_convs.len()).rev() {
            let b = self.layout.enc_convs[i];
            let (cin, cout) = (b.cols / taps, b.rows);
            mask_by_active(&mut ws.grad[..cout * p], &ws.enc[i + 1]);
            add_row_sums(&mut grads[b.b..b.end()], &ws.grad[..cout * p], p);
            T::gemm(
                cout,
                p,
                cin * taps,
                T::one(),
                &ws.grad[..cout * p],
                (p as isize, 1),
                &ws.cols[i],
                (1, p as isize),
                T::one(),
                &mut grads[b.w..b.b],
                (b.cols as isize, 1),
            );
            if i == 0 {
                break;
            }
            let dcols = &mut ws.scratch[..cin * taps * p];
            T::gemm(
                cin * taps,
                cout,
                p,
                T::one(),
                &params[b.w..b.b],
                (1, b.cols as isize),
                &ws.grad[..cout * p],
                (p as isize, 1),
                T::zero(),
                dcols,
                (p as isize, 1),
            );
            let gin = &mut ws.grad_in[..cin * p];
            gin.fill(T::zero());
            self.geometry.col2im_add(dcols, cin, gin);
            std::mem::swap(&mut ws.grad, &mut ws.grad_in);
        }
        sq
    }
}

impl<T> Workspace<T> {
    pub fn output(&self) -> &[T] {
        &self.dec[0]
    }
}
