//! The multi-kernel diffusion network: alternating diffusion stages and
//! per-node 1x1 convolution blocks, with hand-written reverse mode.
//!
//! One layer computes
//!
//! ```text
//! D  = apply_bank(X)                 n x S*c_in
//! A1 = relu(norm(D W1 + b1))         n x c
//! R1 = dropout(A1)
//! X' = relu(norm(R1 W2 + b2))        n x c
//! ```
//!
//! and the head is one more 1x1 convolution. Descriptor heads normalize each
//! output row to unit length; segmentation heads emit raw logits.

mod adam;
mod layers;
mod loss;

use ndarray::{Array1, Array2, ArrayView2, Axis};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng;
use crate::spectral::{apply_bank, apply_bank_adjoint, KernelBank};

pub use adam::{adam_step, OptimizerState};
pub use layers::{
    dropout, instance_norm_backward, instance_norm_forward, relu, relu_backward, Mode, NormCache,
    NORM_EPS,
};
pub use loss::{label_weights, softmax, triplet_hinge_loss, weighted_ce_loss, TripletLoss};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Relu,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Head {
    /// Unit-norm output rows.
    Descriptor,
    /// Raw class logits.
    Segmentation,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Architecture {
    pub n_layers: usize,
    pub hidden_width: usize,
    pub n_kernels: usize,
    pub out_dim: usize,
    pub input_dim: usize,
    pub activation: Activation,
    pub dropout_p: f64,
    pub head: Head,
}

impl Default for Architecture {
    fn default() -> Self {
        Architecture {
            n_layers: 4,
            hidden_width: 64,
            n_kernels: 8,
            out_dim: 16,
            input_dim: 1,
            activation: Activation::Relu,
            dropout_p: 0.2,
            head: Head::Descriptor,
        }
    }
}

impl Architecture {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("n_layers", self.n_layers),
            ("hidden_width", self.hidden_width),
            ("n_kernels", self.n_kernels),
            ("out_dim", self.out_dim),
            ("input_dim", self.input_dim),
        ] {
            if v == 0 {
                return Err(Error::InvalidArgument(format!("{name} must be >= 1")));
            }
        }
        if !(0.0..1.0).contains(&self.dropout_p) {
            return Err(Error::InvalidArgument(format!(
                "dropout_p must be in [0, 1), got {}",
                self.dropout_p
            )));
        }
        Ok(())
    }

    fn layer_input(&self, l: usize) -> usize {
        if l == 0 {
            self.input_dim
        } else {
            self.hidden_width
        }
    }

    /// Closed-form number of trainable scalars.
    pub fn param_count(&self) -> usize {
        let w = self.hidden_width;
        let per_layer = |c_in: usize| self.n_kernels * c_in * w + w + w * w + w + 4 * w;
        (0..self.n_layers)
            .map(|l| per_layer(self.layer_input(l)))
            .sum::<usize>()
            + w * self.out_dim
            + self.out_dim
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerParams {
    pub w1: Array2<f64>,
    pub b1: Array1<f64>,
    pub scale1: Array1<f64>,
    pub shift1: Array1<f64>,
    pub w2: Array2<f64>,
    pub b2: Array1<f64>,
    pub scale2: Array1<f64>,
    pub shift2: Array1<f64>,
}

/// Trainable tensors. Gradients use the same type.
#[derive(Debug, Clone, PartialEq)]
pub struct NetworkParams {
    pub layers: Vec<LayerParams>,
    pub w_out: Array2<f64>,
    pub b_out: Array1<f64>,
}

impl NetworkParams {
    pub fn zeros(arch: &Architecture) -> Self {
        let w = arch.hidden_width;
        let layers = (0..arch.n_layers)
            .map(|l| LayerParams {
                w1: Array2::zeros((arch.n_kernels * arch.layer_input(l), w)),
                b1: Array1::zeros(w),
                scale1: Array1::zeros(w),
                shift1: Array1::zeros(w),
                w2: Array2::zeros((w, w)),
                b2: Array1::zeros(w),
                scale2: Array1::zeros(w),
                shift2: Array1::zeros(w),
            })
            .collect();
        NetworkParams {
            layers,
            w_out: Array2::zeros((w, arch.out_dim)),
            b_out: Array1::zeros(arch.out_dim),
        }
    }

    /// Every tensor with its name and shape, in a fixed order.
    pub fn tensors(&self) -> Vec<(String, Vec<usize>, &[f64])> {
        let mut out = Vec::new();
        for (l, p) in self.layers.iter().enumerate() {
            out.push((
                format!("layer{l}.w1"),
                p.w1.shape().to_vec(),
                p.w1.as_slice().unwrap(),
            ));
            for (name, t) in [("b1", &p.b1), ("scale1", &p.scale1), ("shift1", &p.shift1)] {
                out.push((
                    format!("layer{l}.{name}"),
                    vec![t.len()],
                    t.as_slice().unwrap(),
                ));
            }
            out.push((
                format!("layer{l}.w2"),
                p.w2.shape().to_vec(),
                p.w2.as_slice().unwrap(),
            ));
            for (name, t) in [("b2", &p.b2), ("scale2", &p.scale2), ("shift2", &p.shift2)] {
                out.push((
                    format!("layer{l}.{name}"),
                    vec![t.len()],
                    t.as_slice().unwrap(),
                ));
            }
        }
        out.push((
            "head.w".into(),
            self.w_out.shape().to_vec(),
            self.w_out.as_slice().unwrap(),
        ));
        out.push((
            "head.b".into(),
            vec![self.b_out.len()],
            self.b_out.as_slice().unwrap(),
        ));
        out
    }

    /// Mutable views in the order of [`NetworkParams::tensors`].
    pub fn tensors_mut(&mut self) -> Vec<&mut [f64]> {
        let mut out: Vec<&mut [f64]> = Vec::new();
        for p in &mut self.layers {
            out.push(p.w1.as_slice_mut().unwrap());
            out.push(p.b1.as_slice_mut().unwrap());
            out.push(p.scale1.as_slice_mut().unwrap());
            out.push(p.shift1.as_slice_mut().unwrap());
            out.push(p.w2.as_slice_mut().unwrap());
            out.push(p.b2.as_slice_mut().unwrap());
            out.push(p.scale2.as_slice_mut().unwrap());
            out.push(p.shift2.as_slice_mut().unwrap());
        }
        out.push(self.w_out.as_slice_mut().unwrap());
        out.push(self.b_out.as_slice_mut().unwrap());
        out
    }

    pub fn param_count(&self) -> usize {
        self.tensors().iter().map(|(_, _, t)| t.len()).sum()
    }

    pub fn all_finite(&self) -> bool {
        self.tensors()
            .iter()
            .all(|(_, _, t)| t.iter().all(|v| v.is_finite()))
    }

    /// `self += other`, tensor by tensor.
    pub fn accumulate(&mut self, other: &NetworkParams) {
        let src: Vec<Vec<f64>> = other
            .tensors()
            .into_iter()
            .map(|(_, _, t)| t.to_vec())
            .collect();
        for (dst, src) in self.tensors_mut().into_iter().zip(src) {
            for (d, s) in dst.iter_mut().zip(src) {
                *d += s;
            }
        }
    }

    pub fn scale(&mut self, factor: f64) {
        for t in self.tensors_mut() {
            t.iter_mut().for_each(|v| *v *= factor);
        }
    }
}

/// Uniform `±sqrt(6 / fan_in)` weights, zero biases, unit norm scale and
/// zero shift.
pub fn init_params(arch: &Architecture, seed: u64) -> Result<NetworkParams> {
    arch.validate()?;
    let mut p = NetworkParams::zeros(arch);
    let mut r = rng::stream(seed, "init", 0, 0);
    let mut fill = |w: &mut Array2<f64>| {
        let bound = (6.0 / w.nrows() as f64).sqrt();
        w.mapv_inplace(|_| r.gen_range(-bound..bound));
    };
    for layer in &mut p.layers {
        fill(&mut layer.w1);
        layer.scale1.fill(1.0);
        fill(&mut layer.w2);
        layer.scale2.fill(1.0);
    }
    fill(&mut p.w_out);
    Ok(p)
}

#[derive(Debug, Clone)]
struct LayerCache {
    diffused: Array2<f64>,
    pre1: Array2<f64>,
    norm1: NormCache,
    mask: Option<Array2<f64>>,
    dropped: Array2<f64>,
    pre2: Array2<f64>,
    norm2: NormCache,
}

/// Intermediate values recorded by [`forward`] for [`backward`].
#[derive(Debug, Clone)]
pub struct ForwardCache {
    layers: Vec<LayerCache>,
    features: Array2<f64>,
    head_raw: Array2<f64>,
    output: Array2<f64>,
}

impl ForwardCache {
    /// Last hidden representation (input of the head).
    pub fn features(&self) -> &Array2<f64> {
        &self.features
    }
}

fn add_bias(mut z: Array2<f64>, b: &Array1<f64>) -> Array2<f64> {
    z += b;
    z
}

fn normalize_rows(z: &Array2<f64>) -> Array2<f64> {
    let mut y = z.clone();
    for mut row in y.rows_mut() {
        let norm = row.dot(&row).sqrt();
        if norm > 0.0 {
            row /= norm;
        }
    }
    y
}

fn check_finite(a: &Array2<f64>, what: &str) -> Result<()> {
    if a.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFinite(what.into()))
    }
}

fn check_shapes(arch: &Architecture, params: &NetworkParams, bank: &KernelBank) -> Result<()> {
    if bank.len() != arch.n_kernels {
        return Err(Error::Shape(format!(
            "architecture expects {} kernels, bank has {}",
            arch.n_kernels,
            bank.len()
        )));
    }
    let expect = NetworkParams::zeros(arch);
    let same = params.layers.len() == expect.layers.len()
        && params
            .tensors()
            .iter()
            .zip(expect.tensors())
            .all(|((_, a, _), (_, b, _))| *a == b);
    if !same {
        return Err(Error::Shape(
            "parameters do not match the architecture".into(),
        ));
    }
    Ok(())
}

/// Run the network on one graph.
pub fn forward(
    arch: &Architecture,
    params: &NetworkParams,
    bank: &KernelBank,
    x: ArrayView2<f64>,
    mode: Mode,
) -> Result<(Array2<f64>, ForwardCache)> {
    check_shapes(arch, params, bank)?;
    if x.nrows() != bank.n() || x.ncols() != arch.input_dim {
        return Err(Error::Shape(format!(
            "input {}x{} for a {}-node bank and input_dim {}",
            x.nrows(),
            x.ncols(),
            bank.n(),
            arch.input_dim
        )));
    }
    let mut h = x.to_owned();
    let mut caches = Vec::with_capacity(arch.n_layers);
    for (l, p) in params.layers.iter().enumerate() {
        let diffused = apply_bank(bank, h.view())?;
        let z1 = add_bias(diffused.dot(&p.w1), &p.b1);
        let (pre1, norm1) =
            instance_norm_forward(z1.view(), p.scale1.view(), p.shift1.view(), NORM_EPS);
        let layer_mode = match mode {
            Mode::Train { seed } => Mode::Train {
                seed: rng::derive_seed(seed, "layer", l as u64, 0),
            },
            Mode::Eval => Mode::Eval,
        };
        let (dropped, mask) = dropout(relu(pre1.clone()), arch.dropout_p, layer_mode);
        let z2 = add_bias(dropped.dot(&p.w2), &p.b2);
        let (pre2, norm2) =
            instance_norm_forward(z2.view(), p.scale2.view(), p.shift2.view(), NORM_EPS);
        h = relu(pre2.clone());
        check_finite(&h, &format!("layer {l} activation"))?;
        caches.push(LayerCache {
            diffused,
            pre1,
            norm1,
            mask,
            dropped,
            pre2,
            norm2,
        });
    }
    let head_raw = add_bias(h.dot(&params.w_out), &params.b_out);
    let output = match arch.head {
        Head::Descriptor => normalize_rows(&head_raw),
        Head::Segmentation => head_raw.clone(),
    };
    check_finite(&output, "network output")?;
    Ok((
        output.clone(),
        ForwardCache {
            layers: caches,
            features: h,
            head_raw,
            output,
        },
    ))
}

/// Gradients of all parameters given `dy = dLoss/dOutput`, plus the input
/// gradient when requested.
pub fn backward(
    arch: &Architecture,
    params: &NetworkParams,
    bank: &KernelBank,
    cache: &ForwardCache,
    dy: ArrayView2<f64>,
    input_grad: bool,
) -> Result<(NetworkParams, Option<Array2<f64>>)> {
    if dy.dim() != cache.output.dim() || cache.layers.len() != params.layers.len() {
        return Err(Error::Shape(format!(
            "output gradient {:?} does not match cached output {:?}",
            dy.dim(),
            cache.output.dim()
        )));
    }
    let mut grads = NetworkParams::zeros(arch);
    let dz = match arch.head {
        Head::Segmentation => dy.to_owned(),
        Head::Descriptor => {
            let mut dz = dy.to_owned();
            for ((mut g, y), z) in dz
                .rows_mut()
                .into_iter()
                .zip(cache.output.rows())
                .zip(cache.head_raw.rows())
            {
                let norm = z.dot(&z).sqrt();
                if norm > 0.0 {
                    let proj = y.dot(&g);
                    g.zip_mut_with(&y, |gv, &yv| *gv = (*gv - yv * proj) / norm);
                }
            }
            dz
        }
    };
    grads.w_out = cache.features.t().dot(&dz);
    grads.b_out = dz.sum_axis(Axis(0));
    let mut dh = dz.dot(&params.w_out.t());

    for l in (0..params.layers.len()).rev() {
        let p = &params.layers[l];
        let c = &cache.layers[l];
        let g = &mut grads.layers[l];

        let dpre2 = relu_backward(c.pre2.view(), dh);
        let (dz2, dscale2, dshift2) =
            instance_norm_backward(&c.norm2, p.scale2.view(), dpre2.view());
        g.scale2 = dscale2;
        g.shift2 = dshift2;
        g.w2 = c.dropped.t().dot(&dz2);
        g.b2 = dz2.sum_axis(Axis(0));
        let mut da1 = dz2.dot(&p.w2.t());
        if let Some(mask) = &c.mask {
            da1 *= mask;
        }
        let dpre1 = relu_backward(c.pre1.view(), da1);
        let (dz1, dscale1, dshift1) =
            instance_norm_backward(&c.norm1, p.scale1.view(), dpre1.view());
        g.scale1 = dscale1;
        g.shift1 = dshift1;
        g.w1 = c.diffused.t().dot(&dz1);
        g.b1 = dz1.sum_axis(Axis(0));
        if l == 0 && !input_grad {
            return Ok((grads, None));
        }
        let ddiffused = dz1.dot(&p.w1.t());
        dh = apply_bank_adjoint(bank, ddiffused.view())?;
    }
    Ok((grads, Some(dh)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::spectral::{build_kernel_bank, DiffusionConfig, DiffusionMode, Propagation};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn small_arch(head: Head) -> Architecture {
        Architecture {
            n_layers: 2,
            hidden_width: 5,
            n_kernels: 2,
            out_dim: 3,
            input_dim: 1,
            activation: Activation::Relu,
            dropout_p: 0.0,
            head,
        }
    }

    fn small_bank(n: usize, seed: u64) -> KernelBank {
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        let coords: Vec<[f64; 3]> = (0..n).map(|_| [r.gen(), r.gen(), r.gen()]).collect();
        build_kernel_bank(&coords, &[0.2, 0.5], 4, &DiffusionConfig::default()).unwrap()
    }

    #[test]
    fn default_parameter_count() {
        let arch = Architecture::default();
        assert_eq!(arch.param_count(), 117_776);
        let p = init_params(&arch, 0).unwrap();
        assert_eq!(p.param_count(), arch.param_count());
        let three = Architecture {
            input_dim: 3,
            ..arch
        };
        assert_eq!(three.param_count(), 118_800);
    }

    #[test]
    fn init_is_deterministic_with_zero_biases() {
        let arch = small_arch(Head::Descriptor);
        let a = init_params(&arch, 5).unwrap();
        assert_eq!(a, init_params(&arch, 5).unwrap());
        assert_ne!(a, init_params(&arch, 6).unwrap());
        for l in &a.layers {
            assert!(l.b1.iter().chain(&l.b2).all(|&v| v == 0.0));
            assert!(l.scale1.iter().all(|&v| v == 1.0));
            assert!(l.shift2.iter().all(|&v| v == 0.0));
            let bound = (6.0 / l.w1.nrows() as f64).sqrt();
            assert!(l.w1.iter().all(|v| v.abs() <= bound));
        }
        assert!(a.b_out.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn descriptor_rows_are_unit() {
        let arch = small_arch(Head::Descriptor);
        let bank = small_bank(30, 1);
        let p = init_params(&arch, 2).unwrap();
        let (y, _) = forward(&arch, &p, &bank, Array2::ones((30, 1)).view(), Mode::Eval).unwrap();
        for row in y.rows() {
            assert!((row.dot(&row).sqrt() - 1.0).abs() < 1e-6);
        }
        let (y2, _) = forward(&arch, &p, &bank, Array2::ones((30, 1)).view(), Mode::Eval).unwrap();
        assert_eq!(y, y2);
    }

    #[test]
    fn zero_upstream_gradient_gives_zero_gradients() {
        let arch = Architecture {
            dropout_p: 0.3,
            ..small_arch(Head::Segmentation)
        };
        let bank = small_bank(20, 3);
        let p = init_params(&arch, 4).unwrap();
        let (y, cache) = forward(
            &arch,
            &p,
            &bank,
            Array2::ones((20, 1)).view(),
            Mode::Train { seed: 1 },
        )
        .unwrap();
        let (g, dx) = backward(
            &arch,
            &p,
            &bank,
            &cache,
            Array2::zeros(y.dim()).view(),
            true,
        )
        .unwrap();
        assert!(g
            .tensors()
            .iter()
            .all(|(_, _, t)| t.iter().all(|&v| v == 0.0)));
        assert!(dx.unwrap().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn literal_rw_flattens_featureless_input() {
        let arch = small_arch(Head::Segmentation);
        let mut r = ChaCha8Rng::seed_from_u64(9);
        let coords: Vec<[f64; 3]> = (0..40).map(|_| [r.gen(), r.gen(), r.gen()]).collect();
        let cfg = DiffusionConfig {
            mode: DiffusionMode::Rw,
            propagation: Propagation::RwNormalized,
            ..DiffusionConfig::default()
        };
        let bank = build_kernel_bank(&coords, &[0.2, 0.5], 5, &cfg).unwrap();
        let p = init_params(&arch, 1).unwrap();
        let (_, cache) =
            forward(&arch, &p, &bank, Array2::ones((40, 1)).view(), Mode::Eval).unwrap();
        for layer in &cache.layers {
            for col in layer.diffused.columns() {
                assert!(col.iter().all(|v| (v - col[0]).abs() < 1e-8));
            }
        }
    }

    #[test]
    fn gradients_match_finite_differences() {
        let arch = Architecture {
            dropout_p: 0.25,
            ..small_arch(Head::Segmentation)
        };
        let bank = small_bank(12, 5);
        let p = init_params(&arch, 7).unwrap();
        let x = Array2::ones((12, 1));
        let labels: Vec<usize> = (0..12).map(|i| i % 3).collect();
        let mode = Mode::Train { seed: 3 };
        let loss = |p: &NetworkParams| {
            let (y, _) = forward(&arch, p, &bank, x.view(), mode).unwrap();
            weighted_ce_loss(y.view(), &labels, &[1.0, 0.8, 1.2])
                .unwrap()
                .0
        };
        let (y, cache) = forward(&arch, &p, &bank, x.view(), mode).unwrap();
        let (_, dy) = weighted_ce_loss(y.view(), &labels, &[1.0, 0.8, 1.2]).unwrap();
        let (g, _) = backward(&arch, &p, &bank, &cache, dy.view(), false).unwrap();
        let analytic: Vec<Vec<f64>> = g.tensors().iter().map(|(_, _, t)| t.to_vec()).collect();
        let h = 1e-5;
        for (ti, a) in analytic.iter().enumerate() {
            let mut diff = 0.0f64;
            let mut norm = 0.0f64;
            for j in 0..a.len() {
                let mut plus = p.clone();
                plus.tensors_mut()[ti][j] += h;
                let mut minus = p.clone();
                minus.tensors_mut()[ti][j] -= h;
                let fd = (loss(&plus) - loss(&minus)) / (2.0 * h);
                diff += (fd - a[j]).powi(2);
                norm += fd * fd + a[j] * a[j];
            }
            assert!(diff.sqrt() <= 1e-4 * norm.sqrt().max(1e-4), "tensor {ti}");
        }
    }
}
