//! Residual MLP Q-network with exact reverse-mode gradients.
//!
//! ```text
//! h0      = relu(W_in s + b_in)                  768 -> 256
//! h_{i+1} = relu(h_i + W_i2 relu(W_i1 h_i + b_i1) + b_i2)   i = 0..3
//! q       = W_head h_3 + b_head                  256 -> L
//! ```
//!
//! All parameters live in one flat buffer (layer by layer, weights
//! row-major `out x in` then bias), so optimizers, Polyak averaging and
//! checkpoints operate on a single slice.

mod adam;
mod checkpoint;

use crate::error::{Error, Result};
use crate::rng::SeededRng;
use crate::scalar::{axpy, dot, Scalar};

pub use adam::{adam_step, AdamConfig, AdamState};
pub use checkpoint::{load_checkpoint, save_checkpoint, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};

pub const HIDDEN_DIM: usize = 256;
pub const NUM_BLOCKS: usize = 3;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Architecture {
    pub input_dim: usize,
    pub hidden_dim: usize,
    pub num_blocks: usize,
    pub num_actions: usize,
}

impl Architecture {
    /// 768 -> 256, three residual blocks, `num_actions` outputs.
    pub fn standard(num_actions: usize) -> Self {
        Self {
            input_dim: crate::embedder::STATE_DIM,
            hidden_dim: HIDDEN_DIM,
            num_blocks: NUM_BLOCKS,
            num_actions,
        }
    }

    fn validate(&self) -> Result<()> {
        if self.num_actions < 2 {
            return Err(Error::invalid(format!("need at least 2 actions, got {}", self.num_actions)));
        }
        if self.input_dim == 0 || self.hidden_dim == 0 {
            return Err(Error::invalid("zero-width layer"));
        }
        Ok(())
    }

    /// `(rows, cols)` of every affine layer in storage order.
    pub fn layer_shapes(&self) -> Vec<(usize, usize)> {
        let mut shapes = vec![(self.hidden_dim, self.input_dim)];
        shapes.extend(std::iter::repeat((self.hidden_dim, self.hidden_dim)).take(2 * self.num_blocks));
        shapes.push((self.num_actions, self.hidden_dim));
        shapes
    }

    pub fn num_params(&self) -> usize {
        self.layer_shapes().iter().map(|(r, c)| r * c + r).sum()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
struct Slot {
    rows: usize,
    cols: usize,
    w: usize,
    b: usize,
}

fn slots(arch: &Architecture) -> Vec<Slot> {
    let mut off = 0;
    arch.layer_shapes()
        .into_iter()
        .map(|(rows, cols)| {
            let s = Slot {
                rows,
                cols,
                w: off,
                b: off + rows * cols,
            };
            off += rows * cols + rows;
            s
        })
        .collect()
}

/// Q-network parameters. The same type holds gradients.
#[derive(Debug, Clone, PartialEq)]
pub struct QNetwork<T> {
    arch: Architecture,
    slots: Vec<Slot>,
    data: Vec<T>,
}

/// Weight init bound for a layer with `fan_in` inputs: `sqrt(6 / fan_in)`,
/// the variance-preserving bound for ReLU layers.
pub fn init_bound(fan_in: usize) -> f64 {
    (6.0 / fan_in as f64).sqrt()
}

/// Standard-shape network for `num_actions` systems.
pub fn init_network<T: Scalar>(num_actions: usize, seed: u64) -> Result<QNetwork<T>> {
    QNetwork::init(Architecture::standard(num_actions), seed)
}

impl<T: Scalar> QNetwork<T> {
    pub fn zeros(arch: Architecture) -> Result<Self> {
        arch.validate()?;
        Ok(Self {
            slots: slots(&arch),
            data: vec![T::zero(); arch.num_params()],
            arch,
        })
    }

    /// Weights uniform in `±init_bound(fan_in)`, drawn layer by layer in
    /// storage order from `SeededRng::new(seed)`; biases zero.
    pub fn init(arch: Architecture, seed: u64) -> Result<Self> {
        let mut net = Self::zeros(arch)?;
        let mut rng = SeededRng::new(seed);
        for s in net.slots.clone() {
            let bound = init_bound(s.cols);
            for w in &mut net.data[s.w..s.b] {
                *w = T::from_f64_lossy((2.0 * rng.unit() - 1.0) * bound);
            }
        }
        Ok(net)
    }

    pub(crate) fn from_parts(arch: Architecture, data: Vec<T>) -> Result<Self> {
        let mut net = Self::zeros(arch)?;
        if data.len() != net.data.len() {
            return Err(Error::Shape(format!("{} parameters for a layout of {}", data.len(), net.data.len())));
        }
        net.data = data;
        Ok(net)
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            arch: self.arch,
            slots: self.slots.clone(),
            data: vec![T::zero(); self.data.len()],
        }
    }

    pub fn architecture(&self) -> Architecture {
        self.arch
    }

    pub fn num_actions(&self) -> usize {
        self.arch.num_actions
    }

    pub fn params(&self) -> &[T] {
        &self.data
    }

    pub fn params_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn num_layers(&self) -> usize {
        self.slots.len()
    }

    /// Weight (row-major `rows x cols`) and bias of affine layer `i`.
    /// Layer 0 is the input projection, the last one the Q head, and the
    /// residual block `j` owns layers `1 + 2j` and `2 + 2j`.
    pub fn layer(&self, i: usize) -> (&[T], &[T]) {
        let s = self.slots[i];
        (&self.data[s.w..s.b], &self.data[s.b..s.b + s.rows])
    }

    pub fn layer_mut(&mut self, i: usize) -> (&mut [T], &mut [T]) {
        let s = self.slots[i];
        let (w, rest) = self.data[s.w..s.b + s.rows].split_at_mut(s.b - s.w);
        (w, rest)
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    fn check_shape(&self, other: &Self) -> Result<()> {
        if self.arch != other.arch {
            return Err(Error::Shape(format!("{:?} vs {:?}", self.arch, other.arch)));
        }
        Ok(())
    }

    pub fn forward(&self, state: &[T]) -> Result<Vec<T>> {
        Ok(self.forward_batch(&[state])?.row(0).to_vec())
    }

    /// Q-values for a batch of states, one row per state.
    pub fn forward_batch(&self, states: &[&[T]]) -> Result<Matrix<T>> {
        Ok(self.forward_cached(states)?.q)
    }

    fn forward_cached(&self, states: &[&[T]]) -> Result<ForwardCache<T>> {
        let arch = self.arch;
        let mut x = Matrix::zeros(states.len(), arch.input_dim);
        for (b, s) in states.iter().enumerate() {
            if s.len() != arch.input_dim {
                return Err(Error::Shape(format!("state of length {}, expected {}", s.len(), arch.input_dim)));
            }
            x.row_mut(b).copy_from_slice(s);
        }

        let mut h0 = self.affine(0, &x);
        relu_in_place(&mut h0);
        check_finite(&h0, "input layer")?;

        let mut hidden = vec![h0];
        let mut inner = Vec::with_capacity(arch.num_blocks);
        for j in 0..arch.num_blocks {
            let h = hidden.last().unwrap();
            let mut u = self.affine(1 + 2 * j, h);
            relu_in_place(&mut u);
            let mut z = self.affine(2 + 2 * j, &u);
            for (zi, &hi) in z.data.iter_mut().zip(&h.data) {
                *zi += hi;
            }
            relu_in_place(&mut z);
            check_finite(&z, "residual block")?;
            inner.push(u);
            hidden.push(z);
        }

        let q = self.affine(self.slots.len() - 1, hidden.last().unwrap());
        check_finite(&q, "Q head")?;
        Ok(ForwardCache { x, hidden, inner, q })
    }

    fn affine(&self, layer: usize, input: &Matrix<T>) -> Matrix<T> {
        let s = self.slots[layer];
        let (w, bias) = self.layer(layer);
        let mut out = Matrix::zeros(input.rows, s.rows);
        for b in 0..input.rows {
            let x = input.row(b);
            let y = out.row_mut(b);
            for o in 0..s.rows {
                y[o] = bias[o] + dot(&w[o * s.cols..(o + 1) * s.cols], x);
            }
        }
        out
    }

    /// Gradient of `q(state) · grad_q` with respect to every parameter.
    pub fn backward(&self, state: &[T], grad_q: &[T]) -> Result<QNetwork<T>> {
        let mut g = Matrix::zeros(1, self.arch.num_actions);
        if grad_q.len() != self.arch.num_actions {
            return Err(Error::Shape(format!("grad_q of length {}, expected {}", grad_q.len(), self.arch.num_actions)));
        }
        g.row_mut(0).copy_from_slice(grad_q);
        let mut grads = self.zeros_like();
        self.backward_batch(&[state], &g, &mut grads)?;
        Ok(grads)
    }

    /// Accumulate `d/dθ Σ_b q(states[b]) · grad_q[b]` into `grads` and
    /// return the Q-values of the forward pass.
    pub fn backward_batch(&self, states: &[&[T]], grad_q: &Matrix<T>, grads: &mut QNetwork<T>) -> Result<Matrix<T>> {
        self.check_shape(grads)?;
        if grad_q.rows != states.len() || grad_q.cols != self.arch.num_actions {
            return Err(Error::Shape(format!(
                "grad_q is {}x{}, expected {}x{}",
                grad_q.rows,
                grad_q.cols,
                states.len(),
                self.arch.num_actions
            )));
        }
        let cache = self.forward_cached(states)?;
        self.backprop(&cache, grad_q, grads);
        Ok(cache.q)
    }

    /// One forward pass, then `loss_grad` maps the Q-values to a loss and
    /// its gradient with respect to them; returns the loss and the
    /// parameter gradients.
    pub fn value_and_grad<F>(&self, states: &[&[T]], loss_grad: F) -> Result<(T, QNetwork<T>)>
    where
        F: FnOnce(&Matrix<T>) -> Result<(T, Matrix<T>)>,
    {
        let cache = self.forward_cached(states)?;
        let (loss, grad_q) = loss_grad(&cache.q)?;
        if grad_q.rows != states.len() || grad_q.cols != self.arch.num_actions {
            return Err(Error::Shape(format!("loss gradient is {}x{}", grad_q.rows, grad_q.cols)));
        }
        let mut grads = self.zeros_like();
        self.backprop(&cache, &grad_q, &mut grads);
        Ok((loss, grads))
    }

    fn backprop(&self, cache: &ForwardCache<T>, grad_q: &Matrix<T>, grads: &mut QNetwork<T>) {
        let head = self.slots.len() - 1;

        let mut dh = self.affine_backward(head, hidden_last(cache), grad_q, grads, true);
        for j in (0..self.arch.num_blocks).rev() {
            let h_out = &cache.hidden[j + 1];
            let h_in = &cache.hidden[j];
            let u = &cache.inner[j];
            // through the outer relu
            for (d, &h) in dh.data.iter_mut().zip(&h_out.data) {
                if h <= T::zero() {
                    *d = T::zero();
                }
            }
            let mut du = self.affine_backward(2 + 2 * j, u, &dh, grads, true);
            for (d, &a) in du.data.iter_mut().zip(&u.data) {
                if a <= T::zero() {
                    *d = T::zero();
                }
            }
            let dh_inner = self.affine_backward(1 + 2 * j, h_in, &du, grads, true);
            // skip connection
            for (d, &di) in dh.data.iter_mut().zip(&dh_inner.data) {
                *d += di;
            }
        }
        for (d, &h) in dh.data.iter_mut().zip(&cache.hidden[0].data) {
            if h <= T::zero() {
                *d = T::zero();
            }
        }
        self.affine_backward(0, &cache.x, &dh, grads, false);
    }

    /// Accumulates weight and bias gradients of layer `layer`; returns the
    /// gradient with respect to its input when `want_input` is set.
    fn affine_backward(
        &self,
        layer: usize,
        input: &Matrix<T>,
        dout: &Matrix<T>,
        grads: &mut QNetwork<T>,
        want_input: bool,
    ) -> Matrix<T> {
        let s = self.slots[layer];
        let (w, _) = self.layer(layer);
        let (gw, gb) = grads.layer_mut(layer);
        let mut din = Matrix::zeros(if want_input { input.rows } else { 0 }, s.cols);
        for b in 0..input.rows {
            let x = input.row(b);
            let dy = dout.row(b);
            for o in 0..s.rows {
                let d = dy[o];
                if d == T::zero() {
                    continue;
                }
                gb[o] += d;
                axpy(d, x, &mut gw[o * s.cols..(o + 1) * s.cols]);
                if want_input {
                    axpy(d, &w[o * s.cols..(o + 1) * s.cols], din.row_mut(b));
                }
            }
        }
        din
    }
}

fn hidden_last<T>(cache: &ForwardCache<T>) -> &Matrix<T> {
    cache.hidden.last().expect("at least the input layer")
}

struct ForwardCache<T> {
    x: Matrix<T>,
    /// Post-activation hidden state before each block and after the last.
    hidden: Vec<Matrix<T>>,
    /// Post-relu inner activation of each block.
    inner: Vec<Matrix<T>>,
    q: Matrix<T>,
}

/// Dense row-major matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix<T> {
    rows: usize,
    cols: usize,
    data: Vec<T>,
}

impl<T: Scalar> Matrix<T> {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![T::zero(); rows * cols],
        }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn row(&self, r: usize) -> &[T] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn row_mut(&mut self, r: usize) -> &mut [T] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }
}

fn relu_in_place<T: Scalar>(m: &mut Matrix<T>) {
    for v in &mut m.data {
        // NaN stays NaN so the finiteness check still sees it
        if *v < T::zero() {
            *v = T::zero();
        }
    }
}

fn check_finite<T: Scalar>(m: &Matrix<T>, what: &str) -> Result<()> {
    if m.data.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFinite(format!("Q-network {what} activations")))
    }
}

/// `target <- tau * online + (1 - tau) * target`, elementwise. Computed as
/// `target + tau * (online - target)` so equal networks stay bit-identical.
pub fn soft_update<T: Scalar>(target: &mut QNetwork<T>, online: &QNetwork<T>, tau: T) -> Result<()> {
    target.check_shape(online)?;
    if !(tau >= T::zero() && tau <= T::one()) {
        return Err(Error::invalid(format!("polyak tau {tau} not in [0, 1]")));
    }
    if tau == T::one() {
        target.data.copy_from_slice(&online.data);
        return Ok(());
    }
    for (t, &o) in target.data.iter_mut().zip(&online.data) {
        *t += tau * (o - *t);
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> Architecture {
        Architecture {
            input_dim: 5,
            hidden_dim: 4,
            num_blocks: 3,
            num_actions: 3,
        }
    }

    #[test]
    fn init_is_deterministic_with_zero_bias() {
        let a: QNetwork<f64> = init_network(8, 7).unwrap();
        let b: QNetwork<f64> = init_network(8, 7).unwrap();
        assert_eq!(a, b);
        for i in 0..a.num_layers() {
            let (w, bias) = a.layer(i);
            assert!(bias.iter().all(|&x| x == 0.0));
            let (_, cols) = a.architecture().layer_shapes()[i];
            assert!(w.iter().all(|x| x.abs() <= init_bound(cols)));
        }
        assert!(init_network::<f64>(1, 0).is_err());
    }

    #[test]
    fn standard_shapes() {
        let net: QNetwork<f32> = init_network(8, 1).unwrap();
        let shapes = net.architecture().layer_shapes();
        assert_eq!(shapes.first(), Some(&(256, 768)));
        assert_eq!(shapes.len(), 8);
        assert_eq!(shapes.last(), Some(&(8, 256)));
    }

    #[test]
    fn zero_params_give_zero_q() {
        let net = QNetwork::<f64>::zeros(Architecture::standard(4)).unwrap();
        let s = crate::embedder::hash_embed("x");
        assert_eq!(net.forward(s.as_slice()).unwrap(), vec![0.0; 4]);
    }

    #[test]
    fn head_bias_passes_through() {
        let mut net = QNetwork::<f64>::zeros(tiny()).unwrap();
        let head = net.num_layers() - 1;
        net.layer_mut(head).1.fill(2.5);
        assert_eq!(net.forward(&[1.0, -1.0, 0.5, 0.0, 3.0]).unwrap(), vec![2.5; 3]);
    }

    #[test]
    fn poisoned_params_error() {
        let mut net = QNetwork::<f64>::init(tiny(), 3).unwrap();
        net.params_mut()[0] = f64::NAN;
        assert!(matches!(net.forward(&[1.0; 5]), Err(Error::NonFinite(_))));
    }

    #[test]
    fn zero_upstream_gradient() {
        let net = QNetwork::<f64>::init(tiny(), 3).unwrap();
        let g = net.backward(&[0.3; 5], &[0.0; 3]).unwrap();
        assert!(g.params().iter().all(|&x| x == 0.0));
    }

    #[test]
    fn soft_update_endpoints() {
        let a = QNetwork::<f64>::init(tiny(), 1).unwrap();
        let b = QNetwork::<f64>::init(tiny(), 2).unwrap();
        let mut t = a.clone();
        soft_update(&mut t, &b, 1.0).unwrap();
        assert_eq!(t, b);
        let mut t = a.clone();
        soft_update(&mut t, &b, 0.0).unwrap();
        assert_eq!(t, a);
        let mut t = a.clone();
        soft_update(&mut t, &a, 0.3).unwrap();
        assert_eq!(t, a);
        let mut zero = a.zeros_like();
        let mut ones = a.zeros_like();
        ones.params_mut().fill(1.0);
        soft_update(&mut zero, &ones, 1e-3).unwrap();
        assert!(zero.params().iter().all(|&x| (x - 0.001).abs() < 1e-15));
        assert!(soft_update(&mut zero, &ones, 1.5).is_err());
    }
}
