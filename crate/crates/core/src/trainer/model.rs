//! Dense ReLU network with a flat parameter vector.
//!
//! Parameters are stored layer by layer: the `out × in` weight matrix
//! (row-major) followed by the `out` biases. Gradients use the same layout.
//! Every layer but the last applies ReLU; the input of the last layer is the
//! embedding.

use rand::Rng;
use rand_distr::{Distribution, Uniform};

use crate::dataio::{put_strings, Reader};
use crate::error::{Error, Result};
use crate::linalg::Matrix;

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"STCK";

#[derive(Debug, Clone, PartialEq)]
pub struct MlpModel {
    sizes: Vec<usize>,
    params: Vec<f64>,
}

/// Activations kept from a forward pass for the backward pass.
#[derive(Debug, Clone)]
pub struct Forward {
    /// `acts[0]` is the input, `acts[l]` the ReLU output of layer `l`.
    acts: Vec<Matrix>,
    pub logits: Matrix,
}

impl Forward {
    /// Input of the output layer.
    pub fn embeddings(&self) -> &Matrix {
        self.acts.last().expect("at least the input is stored")
    }
}

fn param_count(sizes: &[usize]) -> Option<usize> {
    sizes.windows(2).try_fold(0usize, |acc, w| {
        let layer = w[1].checked_mul(w[0])?.checked_add(w[1])?;
        acc.checked_add(layer)
    })
}

fn check_sizes(sizes: &[usize]) -> Result<usize> {
    if sizes.len() < 2 {
        return Err(Error::Invalid(
            "a network needs at least an input and an output size".into(),
        ));
    }
    if sizes.contains(&0) {
        return Err(Error::Invalid(format!(
            "layer sizes must be positive: {sizes:?}"
        )));
    }
    param_count(sizes).ok_or_else(|| Error::Invalid("parameter count overflows".into()))
}

impl MlpModel {
    /// All-zero parameters.
    pub fn zeros(sizes: &[usize]) -> Result<Self> {
        let n = check_sizes(sizes)?;
        Ok(MlpModel {
            sizes: sizes.to_vec(),
            params: vec![0.0; n],
        })
    }

    /// He-uniform weights, zero biases.
    pub fn init<R: Rng + ?Sized>(sizes: &[usize], rng: &mut R) -> Result<Self> {
        let mut model = MlpModel::zeros(sizes)?;
        for (l, &fan_in) in sizes.iter().enumerate().take(model.n_layers()) {
            let bound = (6.0 / fan_in as f64).sqrt();
            let dist = Uniform::new_inclusive(-bound, bound).expect("finite bound");
            let (w, _) = model.layer_range(l);
            for p in &mut model.params[w] {
                *p = dist.sample(rng);
            }
        }
        Ok(model)
    }

    pub fn from_params(sizes: &[usize], params: Vec<f64>) -> Result<Self> {
        let n = check_sizes(sizes)?;
        if params.len() != n {
            return Err(Error::Incompatible(format!(
                "size list {sizes:?} needs {n} parameters, got {}",
                params.len()
            )));
        }
        if params.iter().any(|p| !p.is_finite()) {
            return Err(Error::Invalid("non-finite parameter".into()));
        }
        Ok(MlpModel {
            sizes: sizes.to_vec(),
            params,
        })
    }

    pub fn sizes(&self) -> &[usize] {
        &self.sizes
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    pub fn n_params(&self) -> usize {
        self.params.len()
    }

    pub fn n_layers(&self) -> usize {
        self.sizes.len() - 1
    }

    pub fn input_dim(&self) -> usize {
        self.sizes[0]
    }

    pub fn embedding_dim(&self) -> usize {
        self.sizes[self.sizes.len() - 2]
    }

    pub fn n_outputs(&self) -> usize {
        self.sizes[self.sizes.len() - 1]
    }

    /// Parameter index ranges `(weights, biases)` of layer `l`.
    pub fn layer_range(&self, l: usize) -> (std::ops::Range<usize>, std::ops::Range<usize>) {
        let start: usize = self
            .sizes
            .windows(2)
            .take(l)
            .map(|w| w[1] * w[0] + w[1])
            .sum();
        let (n_in, n_out) = (self.sizes[l], self.sizes[l + 1]);
        let w_end = start + n_in * n_out;
        (start..w_end, w_end..w_end + n_out)
    }

    fn linear(&self, l: usize, input: &Matrix) -> Matrix {
        let (w, b) = self.layer_range(l);
        let (n_in, n_out) = (self.sizes[l], self.sizes[l + 1]);
        let weights = &self.params[w];
        let bias = &self.params[b];
        let mut out = Matrix::zeros(input.rows(), n_out);
        for (i, a) in input.row_iter().enumerate() {
            let out_row = out.row_mut(i);
            for o in 0..n_out {
                let w_row = &weights[o * n_in..(o + 1) * n_in];
                let mut acc = bias[o];
                for (wv, av) in w_row.iter().zip(a) {
                    acc += wv * av;
                }
                out_row[o] = acc;
            }
        }
        out
    }

    /// Accumulates the parameter gradient of layer `l` into `grads` and
    /// returns the gradient with respect to the layer input.
    fn linear_backward(
        &self,
        l: usize,
        input: &Matrix,
        delta: &Matrix,
        grads: &mut [f64],
    ) -> Matrix {
        let (w, b) = self.layer_range(l);
        let (n_in, n_out) = (self.sizes[l], self.sizes[l + 1]);
        let weights = &self.params[w.clone()];
        let mut grad_input = Matrix::zeros(input.rows(), n_in);
        for (i, a) in input.row_iter().enumerate() {
            let d = delta.row(i);
            let gi = grad_input.row_mut(i);
            for o in 0..n_out {
                let dv = d[o];
                if dv == 0.0 {
                    continue;
                }
                grads[b.start + o] += dv;
                let gw = &mut grads[w.start + o * n_in..w.start + (o + 1) * n_in];
                for (g, av) in gw.iter_mut().zip(a) {
                    *g += dv * av;
                }
                let w_row = &weights[o * n_in..(o + 1) * n_in];
                for (g, wv) in gi.iter_mut().zip(w_row) {
                    *g += dv * wv;
                }
            }
        }
        grad_input
    }

    pub fn forward(&self, x: &Matrix) -> Result<Forward> {
        if x.cols() != self.input_dim() {
            return Err(Error::Shape(format!(
                "input has {} columns, model expects {}",
                x.cols(),
                self.input_dim()
            )));
        }
        let last = self.n_layers() - 1;
        let mut acts = vec![x.clone()];
        for l in 0..last {
            let mut z = self.linear(l, &acts[l]);
            relu_in_place(&mut z);
            acts.push(z);
        }
        let logits = self.linear(last, &acts[last]);
        Ok(Forward { acts, logits })
    }

    /// Output layer applied to arbitrary embeddings.
    pub fn head_forward(&self, embeddings: &Matrix) -> Result<Matrix> {
        if embeddings.cols() != self.embedding_dim() {
            return Err(Error::Shape(format!(
                "embeddings have {} columns, head expects {}",
                embeddings.cols(),
                self.embedding_dim()
            )));
        }
        Ok(self.linear(self.n_layers() - 1, embeddings))
    }

    /// Adds the output-layer parameter gradient into `grads` and returns the
    /// gradient with respect to `embeddings`.
    pub fn head_backward(
        &self,
        embeddings: &Matrix,
        grad_logits: &Matrix,
        grads: &mut [f64],
    ) -> Result<Matrix> {
        if grads.len() != self.n_params()
            || grad_logits.rows() != embeddings.rows()
            || grad_logits.cols() != self.n_outputs()
            || embeddings.cols() != self.embedding_dim()
        {
            return Err(Error::Shape(
                "head gradient does not match the model".into(),
            ));
        }
        Ok(self.linear_backward(self.n_layers() - 1, embeddings, grad_logits, grads))
    }

    /// Parameter gradient from upstream gradients on the logits and,
    /// optionally, on the embeddings of the same forward pass.
    pub fn backward(
        &self,
        fwd: &Forward,
        grad_logits: &Matrix,
        grad_embeddings: Option<&Matrix>,
    ) -> Result<Vec<f64>> {
        let n = fwd.logits.rows();
        if fwd.acts.len() != self.n_layers()
            || fwd.logits.cols() != self.n_outputs()
            || fwd
                .acts
                .iter()
                .enumerate()
                .any(|(l, a)| a.cols() != self.sizes[l] || a.rows() != n)
        {
            return Err(Error::Shape(
                "forward state does not belong to this model".into(),
            ));
        }
        if grad_logits.rows() != n || grad_logits.cols() != self.n_outputs() {
            return Err(Error::Shape("logit gradient shape mismatch".into()));
        }
        if let Some(g) = grad_embeddings {
            if g.rows() != n || g.cols() != self.embedding_dim() {
                return Err(Error::Shape("embedding gradient shape mismatch".into()));
            }
        }
        let mut grads = vec![0.0; self.n_params()];
        let mut delta = grad_logits.clone();
        for l in (0..self.n_layers()).rev() {
            let mut grad_in = self.linear_backward(l, &fwd.acts[l], &delta, &mut grads);
            if l == 0 {
                break;
            }
            if l == self.n_layers() - 1 {
                if let Some(g) = grad_embeddings {
                    grad_in = grad_in.add(g)?;
                }
            }
            // ReLU: the stored activation is positive exactly where it let gradient through
            for (gv, &av) in grad_in
                .as_mut_slice()
                .iter_mut()
                .zip(fwd.acts[l].as_slice())
            {
                if av <= 0.0 {
                    *gv = 0.0;
                }
            }
            delta = grad_in;
        }
        Ok(grads)
    }

    /// Copy with the output layer replaced by a fresh `n_out`-way head drawn
    /// from `U(-scale, scale)`, zero biases.
    pub fn with_new_head<R: Rng + ?Sized>(
        &self,
        n_out: usize,
        scale: f64,
        rng: &mut R,
    ) -> Result<MlpModel> {
        let mut sizes = self.sizes.clone();
        *sizes.last_mut().expect("sizes non-empty") = n_out;
        let mut model = MlpModel::zeros(&sizes)?;
        let body_end = self.layer_range(self.n_layers() - 1).0.start;
        model.params[..body_end].copy_from_slice(&self.params[..body_end]);
        let dist =
            Uniform::new_inclusive(-scale, scale).map_err(|e| Error::Invalid(e.to_string()))?;
        let (w, _) = model.layer_range(model.n_layers() - 1);
        for p in &mut model.params[w] {
            *p = dist.sample(rng);
        }
        Ok(model)
    }
}

fn relu_in_place(m: &mut Matrix) {
    for v in m.as_mut_slice() {
        if *v < 0.0 {
            *v = 0.0;
        }
    }
}

/// A model together with the names of its output classes.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub model: MlpModel,
    pub labels: Vec<String>,
}

impl Checkpoint {
    pub fn new(model: MlpModel, labels: Vec<String>) -> Result<Self> {
        if labels.len() != model.n_outputs() {
            return Err(Error::Invalid(format!(
                "{} labels for {} outputs",
                labels.len(),
                model.n_outputs()
            )));
        }
        Ok(Checkpoint { model, labels })
    }

    /// `STCK | u32 version | u32 L | L × u32 sizes | P × f64 params | labels`.
    pub fn encode(&self) -> Result<Vec<u8>> {
        let mut buf = Vec::with_capacity(16 + self.model.n_params() * 8);
        buf.extend_from_slice(CHECKPOINT_MAGIC);
        buf.extend_from_slice(&crate::dataio::FORMAT_VERSION.to_le_bytes());
        buf.extend_from_slice(&(self.model.sizes.len() as u32).to_le_bytes());
        for &s in &self.model.sizes {
            let s =
                u32::try_from(s).map_err(|_| Error::Invalid("layer size exceeds u32".into()))?;
            buf.extend_from_slice(&s.to_le_bytes());
        }
        for p in &self.model.params {
            buf.extend_from_slice(&p.to_le_bytes());
        }
        put_strings(&mut buf, &self.labels)?;
        Ok(buf)
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader::new(bytes);
        r.magic(CHECKPOINT_MAGIC)?;
        r.version()?;
        let count_at = r.pos();
        let n_sizes = r.u32("size count")? as usize;
        if !(2..=64).contains(&n_sizes) {
            return Err(Error::format(
                count_at,
                format!("implausible layer count {n_sizes}"),
            ));
        }
        let mut sizes = Vec::with_capacity(n_sizes);
        for _ in 0..n_sizes {
            let at = r.pos();
            let s = r.u32("layer size")? as usize;
            if s == 0 {
                return Err(Error::format(at, "zero layer size"));
            }
            sizes.push(s);
        }
        let n_params = param_count(&sizes)
            .ok_or_else(|| Error::format(count_at, "parameter count overflows"))?;
        let payload_at = r.pos();
        let need = n_params
            .checked_mul(8)
            .ok_or_else(|| Error::format(payload_at, "parameter count overflows"))?;
        let raw = r.take(need, "parameters")?;
        let mut params = Vec::with_capacity(n_params);
        for (i, chunk) in raw.chunks_exact(8).enumerate() {
            let v = f64::from_le_bytes(chunk.try_into().expect("8 bytes"));
            if !v.is_finite() {
                return Err(Error::format(payload_at + 8 * i, "non-finite parameter"));
            }
            params.push(v);
        }
        let labels_at = r.pos();
        let labels = r.strings("label")?;
        r.finish()?;
        if labels.len() != sizes[n_sizes - 1] {
            return Err(Error::format(
                labels_at,
                format!("{} labels for {} outputs", labels.len(), sizes[n_sizes - 1]),
            ));
        }
        Ok(Checkpoint {
            model: MlpModel { sizes, params },
            labels,
        })
    }

    pub fn write(&self, path: impl AsRef<std::path::Path>) -> Result<()> {
        std::fs::write(path, self.encode()?)?;
        Ok(())
    }

    pub fn read(path: impl AsRef<std::path::Path>) -> Result<Self> {
        Checkpoint::decode(&std::fs::read(path)?)
    }
}
