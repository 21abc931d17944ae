//! Stacked bidirectional recurrent network with a time-distributed sigmoid
//! head, trained by backpropagation through time.
//!
//! A batch of variable-length sequences is packed time-major: samples are
//! sorted by decreasing length, so the samples still active at step `t` are a
//! prefix of the batch and each step is one contiguous block of rows. The
//! backward direction runs the same recurrence over every sequence reversed
//! within its own length; padding therefore never exists and never leaks
//! into states or gradients.

use rand::Rng;

use crate::error::{Error, Result};
use crate::nn::cell::{GruCellParams, LstmCellParams};
use crate::nn::real::{gemm, View};
use crate::nn::{Real, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CellKind {
    Lstm,
    Gru,
}

impl CellKind {
    pub fn gates(self) -> usize {
        match self {
            CellKind::Lstm => 4,
            CellKind::Gru => 3,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            CellKind::Lstm => "lstm",
            CellKind::Gru => "gru",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Architecture {
    pub cell: CellKind,
    /// One-hot width of the first layer's input.
    pub input_size: usize,
    /// Units per direction per layer.
    pub hidden: usize,
    pub layers: usize,
}

const DIRS: [&str; 2] = ["fwd", "bwd"];

impl Architecture {
    fn layer_input(&self, layer: usize) -> usize {
        if layer == 0 {
            self.input_size
        } else {
            2 * self.hidden
        }
    }

    fn index(layer: usize, dir: usize, which: usize) -> usize {
        (layer * 2 + dir) * 3 + which
    }

    fn head_w(&self) -> usize {
        self.layers * 6
    }

    /// Parameter names and shapes in storage order.
    pub fn param_specs(&self) -> Vec<(String, Vec<usize>)> {
        let gh = self.cell.gates() * self.hidden;
        let mut specs = Vec::with_capacity(self.layers * 6 + 2);
        for layer in 0..self.layers {
            for dir in DIRS {
                specs.push((format!("l{layer}.{dir}.w"), vec![gh, self.layer_input(layer)]));
                specs.push((format!("l{layer}.{dir}.u"), vec![gh, self.hidden]));
                specs.push((format!("l{layer}.{dir}.b"), vec![gh]));
            }
        }
        specs.push(("head.w".into(), vec![1, 2 * self.hidden]));
        specs.push(("head.b".into(), vec![1]));
        specs
    }

    fn validate(&self) -> Result<()> {
        if self.hidden == 0 || self.layers == 0 || self.input_size == 0 {
            return Err(Error::Config(format!(
                "hidden, layers and input size must be at least 1: {self:?}"
            )));
        }
        Ok(())
    }
}

/// Named parameter tensors of a network, in [`Architecture::param_specs`] order.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamSet<F> {
    names: Vec<String>,
    tensors: Vec<Tensor<F>>,
}

impl<F: Real> ParamSet<F> {
    pub fn zeros(arch: &Architecture) -> Self {
        let (names, tensors) = arch
            .param_specs()
            .into_iter()
            .map(|(name, shape)| (name, Tensor::zeros(shape)))
            .unzip();
        ParamSet { names, tensors }
    }

    /// Uniform `[-1/√H, 1/√H]` weights, zero biases, LSTM forget bias 1.
    pub fn init<R: Rng>(arch: &Architecture, rng: &mut R) -> Result<Self> {
        arch.validate()?;
        let mut set = Self::zeros(arch);
        let k = 1.0 / (arch.hidden as f64).sqrt();
        let k_head = 1.0 / ((2 * arch.hidden) as f64).sqrt();
        for (name, tensor) in set.names.iter().zip(set.tensors.iter_mut()) {
            if name.ends_with(".w") || name.ends_with(".u") {
                let bound = if name.starts_with("head") { k_head } else { k };
                for v in tensor.data_mut() {
                    *v = F::from_f64(rng.gen_range(-bound..=bound));
                }
            } else if arch.cell == CellKind::Lstm && name.starts_with('l') {
                let h = arch.hidden;
                for v in &mut tensor.data_mut()[h..2 * h] {
                    *v = F::ONE;
                }
            }
        }
        Ok(set)
    }

    pub fn from_parts(names: Vec<String>, tensors: Vec<Tensor<F>>) -> Result<Self> {
        if names.len() != tensors.len() {
            return Err(Error::Shape("names and tensors differ in count".into()));
        }
        Ok(ParamSet { names, tensors })
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn tensors(&self) -> &[Tensor<F>] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor<F>] {
        &mut self.tensors
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<F>> {
        self.names.iter().position(|n| n == name).map(|i| &self.tensors[i])
    }

    /// Checks names and shapes against `arch`.
    pub fn validate(&self, arch: &Architecture) -> Result<()> {
        let specs = arch.param_specs();
        if specs.len() != self.tensors.len() {
            return Err(Error::Shape(format!(
                "{} architecture needs {} tensors, found {}",
                arch.cell.name(),
                specs.len(),
                self.tensors.len()
            )));
        }
        for ((name, shape), (have, tensor)) in specs.iter().zip(self.names.iter().zip(&self.tensors)) {
            if name != have {
                return Err(Error::Shape(format!("expected tensor {name}, found {have}")));
            }
            tensor.expect_shape(name, shape)?;
        }
        Ok(())
    }

    pub fn cast<G: Real>(&self) -> ParamSet<G> {
        ParamSet {
            names: self.names.clone(),
            tensors: self.tensors.iter().map(Tensor::cast).collect(),
        }
    }

    pub fn check_finite(&self) -> Result<()> {
        for (name, t) in self.names.iter().zip(&self.tensors) {
            t.check_finite(name)?;
        }
        Ok(())
    }
}

/// Input sequences of one batch.
#[derive(Debug, Clone, PartialEq)]
pub enum BatchInput<F> {
    /// Symbol indices below `input_size`.
    OneHot(Vec<Vec<usize>>),
    /// One `[len × input_size]` tensor per sequence.
    Dense(Vec<Tensor<F>>),
}

impl<F: Real> BatchInput<F> {
    fn lengths(&self, input_size: usize) -> Result<Vec<usize>> {
        match self {
            BatchInput::OneHot(seqs) => seqs.iter().map(|s| Ok(s.len())).collect(),
            BatchInput::Dense(seqs) => seqs
                .iter()
                .map(|s| match s.shape() {
                    [t, d] if *d == input_size => Ok(*t),
                    other => Err(Error::Shape(format!(
                        "dense input {other:?}, expected [T × {input_size}]"
                    ))),
                })
                .collect(),
        }
    }
}

#[derive(Debug, Clone)]
struct Packing {
    /// rank → sample index
    order: Vec<usize>,
    /// lengths by rank
    lens: Vec<usize>,
    batch_sizes: Vec<usize>,
    /// `offsets[t]` is the first row of step `t`; `offsets[T]` is the row count
    offsets: Vec<usize>,
    /// row → row holding the same sample at the mirrored position
    rev: Vec<usize>,
}

impl Packing {
    fn new(lengths: &[usize]) -> Result<Self> {
        if lengths.is_empty() {
            return Err(Error::Empty("batch".into()));
        }
        if lengths.contains(&0) {
            return Err(Error::Config("sequence length (mask) must be at least 1".into()));
        }
        let mut order: Vec<usize> = (0..lengths.len()).collect();
        order.sort_by(|&a, &b| lengths[b].cmp(&lengths[a]).then(a.cmp(&b)));
        let lens: Vec<usize> = order.iter().map(|&i| lengths[i]).collect();
        let steps = lens[0];
        let batch_sizes: Vec<usize> = (0..steps)
            .map(|t| lens.iter().take_while(|&&l| l > t).count())
            .collect();
        let mut offsets = Vec::with_capacity(steps + 1);
        let mut acc = 0;
        for &n in &batch_sizes {
            offsets.push(acc);
            acc += n;
        }
        offsets.push(acc);
        let mut rev = vec![0; acc];
        for (r, &len) in lens.iter().enumerate() {
            for t in 0..len {
                rev[offsets[t] + r] = offsets[len - 1 - t] + r;
            }
        }
        Ok(Packing {
            order,
            lens,
            batch_sizes,
            offsets,
            rev,
        })
    }

    fn rows(&self) -> usize {
        *self.offsets.last().unwrap()
    }

    fn steps(&self) -> usize {
        self.batch_sizes.len()
    }

    fn row(&self, t: usize, rank: usize) -> usize {
        self.offsets[t] + rank
    }

    fn batch(&self) -> usize {
        self.lens.len()
    }
}

#[derive(Debug, Clone)]
enum LayerInput<F> {
    OneHot { fwd: Vec<usize>, rev: Vec<usize> },
    Dense { fwd: Vec<F>, rev: Vec<F>, width: usize },
}

impl<F: Real> LayerInput<F> {
    fn direction(&self, dir: usize) -> InputRef<'_, F> {
        match self {
            LayerInput::OneHot { fwd, rev } => InputRef::OneHot(if dir == 0 { fwd } else { rev }),
            LayerInput::Dense { fwd, rev, width } => InputRef::Dense(if dir == 0 { fwd } else { rev }, *width),
        }
    }
}

#[derive(Clone, Copy)]
enum InputRef<'a, F> {
    OneHot(&'a [usize]),
    Dense(&'a [F], usize),
}

fn gather_rows<F: Copy>(src: &[F], width: usize, rev: &[usize]) -> Vec<F> {
    let mut out = Vec::with_capacity(src.len());
    for &r in rev {
        out.extend_from_slice(&src[r * width..(r + 1) * width]);
    }
    out
}

/// Activations of one direction of one layer, in that direction's row order.
#[derive(Debug, Clone, Default)]
struct DirCache<F> {
    /// Gate activations `[N × G·H]`.
    gates: Vec<F>,
    /// LSTM cell states `[N × H]`.
    c: Vec<F>,
    tanh_c: Vec<F>,
    h: Vec<F>,
    h_prev: Vec<F>,
    /// GRU `r ⊙ h_prev`.
    rh: Vec<F>,
}

struct Weights<'a, F> {
    w: &'a Tensor<F>,
    u: &'a Tensor<F>,
    b: &'a Tensor<F>,
}

fn transpose<F: Real>(m: &[F], rows: usize, cols: usize) -> Vec<F> {
    let mut out = vec![F::ZERO; m.len()];
    for i in 0..rows {
        for j in 0..cols {
            out[j * rows + i] = m[i * cols + j];
        }
    }
    out
}

fn input_projection<F: Real>(pk: &Packing, input: InputRef<'_, F>, wt: &Weights<'_, F>, gh: usize) -> Vec<F> {
    let n = pk.rows();
    let bias = wt.b.data();
    let mut pre = Vec::with_capacity(n * gh);
    for _ in 0..n {
        pre.extend_from_slice(bias);
    }
    match input {
        InputRef::OneHot(idx) => {
            let d = wt.w.shape()[1];
            let w_t = transpose(wt.w.data(), gh, d);
            for (row, &i) in idx.iter().enumerate() {
                let src = &w_t[i * gh..(i + 1) * gh];
                for (p, w) in pre[row * gh..(row + 1) * gh].iter_mut().zip(src) {
                    *p += *w;
                }
            }
        }
        InputRef::Dense(x, d) => {
            gemm(
                View::rows(x, n, d, d),
                View::rows(wt.w.data(), gh, d, d).t(),
                F::ONE,
                &mut pre,
                gh,
            );
        }
    }
    pre
}

fn run_direction<F: Real>(
    cell: CellKind,
    hidden: usize,
    pk: &Packing,
    input: InputRef<'_, F>,
    wt: &Weights<'_, F>,
) -> DirCache<F> {
    let h = hidden;
    let gh = cell.gates() * h;
    let n_rows = pk.rows();
    let mut cache = DirCache {
        gates: input_projection(pk, input, wt, gh),
        h: vec![F::ZERO; n_rows * h],
        h_prev: vec![F::ZERO; n_rows * h],
        ..DirCache::default()
    };
    let u = wt.u.data();
    match cell {
        CellKind::Lstm => {
            cache.c = vec![F::ZERO; n_rows * h];
            cache.tanh_c = vec![F::ZERO; n_rows * h];
            for t in 0..pk.steps() {
                let n = pk.batch_sizes[t];
                let r0 = pk.offsets[t];
                if t > 0 {
                    let p0 = pk.offsets[t - 1];
                    let (done, _) = cache.h.split_at(r0 * h);
                    let prev = &done[p0 * h..(p0 + n) * h];
                    cache.h_prev[r0 * h..(r0 + n) * h].copy_from_slice(prev);
                    gemm(
                        View::rows(prev, n, h, h),
                        View::rows(u, gh, h, h).t(),
                        F::ONE,
                        &mut cache.gates[r0 * gh..(r0 + n) * gh],
                        gh,
                    );
                }
                for r in 0..n {
                    let row = r0 + r;
                    let g = &mut cache.gates[row * gh..(row + 1) * gh];
                    for j in 0..h {
                        let i = g[j].sigmoid();
                        let f = g[h + j].sigmoid();
                        let cand = g[2 * h + j].tanh();
                        let o = g[3 * h + j].sigmoid();
                        g[j] = i;
                        g[h + j] = f;
                        g[2 * h + j] = cand;
                        g[3 * h + j] = o;
                        let c_prev = if t > 0 {
                            cache.c[(pk.offsets[t - 1] + r) * h + j]
                        } else {
                            F::ZERO
                        };
                        let c = f * c_prev + i * cand;
                        let tc = c.tanh();
                        cache.c[row * h + j] = c;
                        cache.tanh_c[row * h + j] = tc;
                        cache.h[row * h + j] = o * tc;
                    }
                }
            }
        }
        CellKind::Gru => {
            cache.rh = vec![F::ZERO; n_rows * h];
            for t in 0..pk.steps() {
                let n = pk.batch_sizes[t];
                let r0 = pk.offsets[t];
                if t > 0 {
                    let p0 = pk.offsets[t - 1];
                    let (done, _) = cache.h.split_at(r0 * h);
                    let prev = &done[p0 * h..(p0 + n) * h];
                    cache.h_prev[r0 * h..(r0 + n) * h].copy_from_slice(prev);
                    gemm(
                        View::rows(prev, n, h, h),
                        View::rows(u, 2 * h, h, h).t(),
                        F::ONE,
                        &mut cache.gates[r0 * gh..(r0 + n) * gh],
                        gh,
                    );
                }
                for r in 0..n {
                    let row = r0 + r;
                    for j in 0..h {
                        let z = cache.gates[row * gh + j].sigmoid();
                        let rg = cache.gates[row * gh + h + j].sigmoid();
                        cache.gates[row * gh + j] = z;
                        cache.gates[row * gh + h + j] = rg;
                        cache.rh[row * h + j] = rg * cache.h_prev[row * h + j];
                    }
                }
                if t > 0 {
                    gemm(
                        View::rows(&cache.rh[r0 * h..(r0 + n) * h], n, h, h),
                        View::rows(&u[2 * h * h..], h, h, h).t(),
                        F::ONE,
                        &mut cache.gates[r0 * gh + 2 * h..(r0 + n) * gh],
                        gh,
                    );
                }
                for r in 0..n {
                    let row = r0 + r;
                    for j in 0..h {
                        let z = cache.gates[row * gh + j];
                        let cand = cache.gates[row * gh + 2 * h + j].tanh();
                        cache.gates[row * gh + 2 * h + j] = cand;
                        let hp = cache.h_prev[row * h + j];
                        cache.h[row * h + j] = (F::ONE - z) * hp + z * cand;
                    }
                }
            }
        }
    }
    cache
}

struct DirGrads<'a, F> {
    w: &'a mut [F],
    u: &'a mut [F],
    b: &'a mut [F],
}

/// Backpropagates `dh` (gradient w.r.t. this direction's outputs, in its row
/// order) and accumulates weight gradients. Returns the gradient w.r.t. the
/// dense input when one is requested.
#[allow(clippy::too_many_arguments)]
fn backprop_direction<F: Real>(
    cell: CellKind,
    hidden: usize,
    pk: &Packing,
    input: InputRef<'_, F>,
    wt: &Weights<'_, F>,
    cache: &DirCache<F>,
    dh_out: &[F],
    grads: DirGrads<'_, F>,
    want_dx: bool,
) -> Option<Vec<F>> {
    let h = hidden;
    let gh = cell.gates() * h;
    let n_rows = pk.rows();
    let u = wt.u.data();
    let mut dg = vec![F::ZERO; n_rows * gh];
    let mut carry = vec![F::ZERO; pk.batch() * h];
    let one = F::ONE;
    match cell {
        CellKind::Lstm => {
            let mut dc_carry = vec![F::ZERO; pk.batch() * h];
            for t in (0..pk.steps()).rev() {
                let n = pk.batch_sizes[t];
                let r0 = pk.offsets[t];
                for r in 0..n {
                    let row = r0 + r;
                    let g = &cache.gates[row * gh..(row + 1) * gh];
                    let d = &mut dg[row * gh..(row + 1) * gh];
                    for j in 0..h {
                        let dh = dh_out[row * h + j] + carry[r * h + j];
                        let (i, f, cand, o) = (g[j], g[h + j], g[2 * h + j], g[3 * h + j]);
                        let tc = cache.tanh_c[row * h + j];
                        let dc = dc_carry[r * h + j] + dh * o * (one - tc * tc);
                        let c_prev = if t > 0 {
                            cache.c[(pk.offsets[t - 1] + r) * h + j]
                        } else {
                            F::ZERO
                        };
                        d[j] = dc * cand * i * (one - i);
                        d[h + j] = dc * c_prev * f * (one - f);
                        d[2 * h + j] = dc * i * (one - cand * cand);
                        d[3 * h + j] = dh * tc * o * (one - o);
                        dc_carry[r * h + j] = dc * f;
                    }
                }
                if t > 0 {
                    gemm(
                        View::rows(&dg[r0 * gh..(r0 + n) * gh], n, gh, gh),
                        View::rows(u, gh, h, h),
                        F::ZERO,
                        &mut carry[..n * h],
                        h,
                    );
                }
            }
            gemm(
                View::rows(&dg, n_rows, gh, gh).t(),
                View::rows(&cache.h_prev, n_rows, h, h),
                F::ONE,
                grads.u,
                h,
            );
        }
        CellKind::Gru => {
            let mut dhp = vec![F::ZERO; pk.batch() * h];
            let mut d_rh = vec![F::ZERO; pk.batch() * h];
            for t in (0..pk.steps()).rev() {
                let n = pk.batch_sizes[t];
                let r0 = pk.offsets[t];
                for r in 0..n {
                    let row = r0 + r;
                    for j in 0..h {
                        let dh = dh_out[row * h + j] + carry[r * h + j];
                        let z = cache.gates[row * gh + j];
                        let cand = cache.gates[row * gh + 2 * h + j];
                        let hp = cache.h_prev[row * h + j];
                        dg[row * gh + j] = dh * (cand - hp) * z * (one - z);
                        dg[row * gh + 2 * h + j] = dh * z * (one - cand * cand);
                        dhp[r * h + j] = dh * (one - z);
                    }
                }
                if t > 0 {
                    gemm(
                        View::rows(&dg[r0 * gh + 2 * h..], n, h, gh),
                        View::rows(&u[2 * h * h..], h, h, h),
                        F::ZERO,
                        &mut d_rh[..n * h],
                        h,
                    );
                    for r in 0..n {
                        let row = r0 + r;
                        for j in 0..h {
                            let rg = cache.gates[row * gh + h + j];
                            let hp = cache.h_prev[row * h + j];
                            let d = d_rh[r * h + j];
                            dg[row * gh + h + j] = d * hp * rg * (one - rg);
                            dhp[r * h + j] += d * rg;
                        }
                    }
                    gemm(
                        View::rows(&dg[r0 * gh..], n, 2 * h, gh),
                        View::rows(u, 2 * h, h, h),
                        F::ONE,
                        &mut dhp[..n * h],
                        h,
                    );
                }
                carry[..n * h].copy_from_slice(&dhp[..n * h]);
            }
            let (u_zr, u_n) = grads.u.split_at_mut(2 * h * h);
            gemm(
                View::rows(&dg, n_rows, 2 * h, gh).t(),
                View::rows(&cache.h_prev, n_rows, h, h),
                F::ONE,
                u_zr,
                h,
            );
            gemm(
                View::rows(&dg[2 * h..], n_rows, h, gh).t(),
                View::rows(&cache.rh, n_rows, h, h),
                F::ONE,
                u_n,
                h,
            );
        }
    }
    for row in dg.chunks(gh) {
        for (b, d) in grads.b.iter_mut().zip(row) {
            *b += *d;
        }
    }
    match input {
        InputRef::OneHot(idx) => {
            let d = wt.w.shape()[1];
            let mut dw_t = vec![F::ZERO; d * gh];
            for (row, &i) in idx.iter().enumerate() {
                for (acc, v) in dw_t[i * gh..(i + 1) * gh].iter_mut().zip(&dg[row * gh..(row + 1) * gh]) {
                    *acc += *v;
                }
            }
            for j in 0..gh {
                for k in 0..d {
                    grads.w[j * d + k] += dw_t[k * gh + j];
                }
            }
            None
        }
        InputRef::Dense(x, d) => {
            gemm(
                View::rows(&dg, n_rows, gh, gh).t(),
                View::rows(x, n_rows, d, d),
                F::ONE,
                grads.w,
                d,
            );
            want_dx.then(|| {
                let mut dx = vec![F::ZERO; n_rows * d];
                gemm(
                    View::rows(&dg, n_rows, gh, gh),
                    View::rows(wt.w.data(), gh, d, d),
                    F::ZERO,
                    &mut dx,
                    d,
                );
                dx
            })
        }
    }
}

struct LayerCache<F> {
    input: LayerInput<F>,
    dirs: [DirCache<F>; 2],
}

struct Cache<F> {
    packing: Packing,
    layers: Vec<LayerCache<F>>,
    /// Top layer output `[N × 2H]`.
    top: Vec<F>,
    probs: Vec<F>,
}

/// A bidirectional recurrent network that caches its last forward pass.
#[derive(Debug, Clone)]
pub struct Network<F> {
    pub arch: Architecture,
    pub params: ParamSet<F>,
    cache: Option<std::sync::Arc<CacheBox<F>>>,
}

// Keeps `Network: Debug + Clone` without exposing the cache internals.
struct CacheBox<F>(Cache<F>);

impl<F> std::fmt::Debug for CacheBox<F> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str("Cache")
    }
}

impl<F: Real> Network<F> {
    pub fn new(arch: Architecture, params: ParamSet<F>) -> Result<Self> {
        arch.validate()?;
        params.validate(&arch)?;
        Ok(Network {
            arch,
            params,
            cache: None,
        })
    }

    fn weights(&self, layer: usize, dir: usize) -> Weights<'_, F> {
        let t = self.params.tensors();
        Weights {
            w: &t[Architecture::index(layer, dir, 0)],
            u: &t[Architecture::index(layer, dir, 1)],
            b: &t[Architecture::index(layer, dir, 2)],
        }
    }

    /// Runs the network and caches every activation for [`Network::backward`].
    pub fn forward(&mut self, input: &BatchInput<F>) -> Result<()> {
        self.cache = None;
        let arch = self.arch;
        let h = arch.hidden;
        let packing = Packing::new(&input.lengths(arch.input_size)?)?;
        let pk = &packing;
        let layer_input = match input {
            BatchInput::OneHot(seqs) => {
                let mut idx = vec![0usize; pk.rows()];
                for (r, &s) in pk.order.iter().enumerate() {
                    for (t, &sym) in seqs[s].iter().enumerate() {
                        if sym >= arch.input_size {
                            return Err(Error::Shape(format!(
                                "symbol {sym} outside input size {}",
                                arch.input_size
                            )));
                        }
                        idx[pk.row(t, r)] = sym;
                    }
                }
                let rev = pk.rev.iter().map(|&r| idx[r]).collect();
                LayerInput::OneHot { fwd: idx, rev }
            }
            BatchInput::Dense(seqs) => {
                let d = arch.input_size;
                let mut x = vec![F::ZERO; pk.rows() * d];
                for (r, &s) in pk.order.iter().enumerate() {
                    for (t, src) in seqs[s].data().chunks(d).enumerate() {
                        let row = pk.row(t, r);
                        x[row * d..(row + 1) * d].copy_from_slice(src);
                    }
                }
                let rev = gather_rows(&x, d, &pk.rev);
                LayerInput::Dense { fwd: x, rev, width: d }
            }
        };
        let mut layers = Vec::with_capacity(arch.layers);
        let mut next = Some(layer_input);
        let mut top = Vec::new();
        for layer in 0..arch.layers {
            let input = next.take().expect("layer input");
            let fwd = run_direction(arch.cell, h, pk, input.direction(0), &self.weights(layer, 0));
            let bwd = run_direction(arch.cell, h, pk, input.direction(1), &self.weights(layer, 1));
            let mut out = vec![F::ZERO; pk.rows() * 2 * h];
            for row in 0..pk.rows() {
                let o = &mut out[row * 2 * h..(row + 1) * 2 * h];
                o[..h].copy_from_slice(&fwd.h[row * h..(row + 1) * h]);
                let rr = pk.rev[row];
                o[h..].copy_from_slice(&bwd.h[rr * h..(rr + 1) * h]);
            }
            layers.push(LayerCache {
                input,
                dirs: [fwd, bwd],
            });
            if layer + 1 < arch.layers {
                let rev = gather_rows(&out, 2 * h, &pk.rev);
                next = Some(LayerInput::Dense {
                    fwd: out,
                    rev,
                    width: 2 * h,
                });
            } else {
                top = out;
            }
        }
        let t = self.params.tensors();
        let head_w = t[arch.head_w()].data();
        let head_b = t[arch.head_w() + 1].data()[0];
        let probs: Vec<F> = top
            .chunks(2 * h)
            .map(|s| (s.iter().zip(head_w).map(|(a, b)| *a * *b).sum::<F>() + head_b).sigmoid())
            .collect();
        if probs.iter().any(|p| !p.is_finite()) {
            return Err(Error::NonFinite("forward pass".into()));
        }
        self.cache = Some(std::sync::Arc::new(CacheBox(Cache {
            packing,
            layers,
            top,
            probs,
        })));
        Ok(())
    }

    fn cache(&self) -> Result<&Cache<F>> {
        self.cache
            .as_deref()
            .map(|c| &c.0)
            .ok_or_else(|| Error::Config("no cached forward pass".into()))
    }

    /// Per-sample split probabilities of the cached forward pass, in input order.
    pub fn probabilities(&self) -> Result<Vec<Vec<F>>> {
        let cache = self.cache()?;
        let pk = &cache.packing;
        let mut out = vec![Vec::new(); pk.batch()];
        for (r, &s) in pk.order.iter().enumerate() {
            out[s] = (0..pk.lens[r]).map(|t| cache.probs[pk.row(t, r)]).collect();
        }
        Ok(out)
    }

    /// Batch loss: the mean over samples of each sample's masked BCE.
    pub fn loss(&self, labels: &[Vec<F>]) -> Result<F> {
        Ok(self.loss_terms(labels)?.0)
    }

    fn loss_terms(&self, labels: &[Vec<F>]) -> Result<(F, Vec<F>)> {
        let cache = self.cache()?;
        let pk = &cache.packing;
        if labels.len() != pk.batch() {
            return Err(Error::Shape(format!(
                "{} label rows for a batch of {}",
                labels.len(),
                pk.batch()
            )));
        }
        let lo = F::from_f64(crate::nn::loss::PROB_EPS);
        let hi = F::ONE - lo;
        let mut total = F::ZERO;
        let mut dlogit = vec![F::ZERO; pk.rows()];
        let batch = F::from_f64(pk.batch() as f64);
        for (r, &s) in pk.order.iter().enumerate() {
            let len = pk.lens[r];
            if labels[s].len() != len {
                return Err(Error::Shape(format!(
                    "sample {s}: {} labels for {len} positions",
                    labels[s].len()
                )));
            }
            let weight = F::ONE / (F::from_f64(len as f64) * batch);
            let mut sample = F::ZERO;
            for (t, &y) in labels[s].iter().enumerate() {
                crate::nn::loss::check_label(y)?;
                let row = pk.row(t, r);
                let p = cache.probs[row];
                let clamped = if p < lo {
                    lo
                } else if p > hi {
                    hi
                } else {
                    p
                };
                sample -= y * clamped.ln() + (F::ONE - y) * (F::ONE - clamped).ln();
                if clamped == p {
                    dlogit[row] = (p - y) * weight;
                }
            }
            total += sample / F::from_f64(len as f64);
        }
        Ok((total / batch, dlogit))
    }

    /// Exact gradients of [`Network::loss`] for every parameter tensor.
    /// Consumes the cached forward pass.
    pub fn backward(&mut self, labels: &[Vec<F>]) -> Result<(F, Vec<Tensor<F>>)> {
        let (loss, dlogit) = self.loss_terms(labels)?;
        let cache_arc = self
            .cache
            .take()
            .ok_or_else(|| Error::Config("no cached forward pass".into()))?;
        let cache = &cache_arc.0;
        let arch = self.arch;
        let h = arch.hidden;
        let pk = &cache.packing;
        let mut grads: Vec<Tensor<F>> = self
            .params
            .tensors()
            .iter()
            .map(|t| Tensor::zeros(t.shape().to_vec()))
            .collect();

        let head_w = self.params.tensors()[arch.head_w()].data().to_vec();
        let mut dy = vec![F::ZERO; pk.rows() * 2 * h];
        {
            let (gw, gb) = grads.split_at_mut(arch.head_w() + 1);
            let gw = gw[arch.head_w()].data_mut();
            let gb = gb[0].data_mut();
            for (row, &d) in dlogit.iter().enumerate() {
                let state = &cache.top[row * 2 * h..(row + 1) * 2 * h];
                for k in 0..2 * h {
                    gw[k] += d * state[k];
                    dy[row * 2 * h + k] = d * head_w[k];
                }
                gb[0] += d;
            }
        }

        for layer in (0..arch.layers).rev() {
            let lc = &cache.layers[layer];
            let mut dh_fwd = vec![F::ZERO; pk.rows() * h];
            let mut dh_rev = vec![F::ZERO; pk.rows() * h];
            for row in 0..pk.rows() {
                let src = &dy[row * 2 * h..(row + 1) * 2 * h];
                dh_fwd[row * h..(row + 1) * h].copy_from_slice(&src[..h]);
                let rr = pk.rev[row];
                dh_rev[rr * h..(rr + 1) * h].copy_from_slice(&src[h..]);
            }
            let want_dx = layer > 0;
            let mut dxs: [Option<Vec<F>>; 2] = [None, None];
            for (dir, dh) in [dh_fwd, dh_rev].iter().enumerate() {
                let base = Architecture::index(layer, dir, 0);
                let (gw, rest) = grads[base..base + 3].split_at_mut(1);
                let (gu, gb) = rest.split_at_mut(1);
                dxs[dir] = backprop_direction(
                    arch.cell,
                    h,
                    pk,
                    lc.input.direction(dir),
                    &self.weights(layer, dir),
                    &lc.dirs[dir],
                    dh,
                    DirGrads {
                        w: gw[0].data_mut(),
                        u: gu[0].data_mut(),
                        b: gb[0].data_mut(),
                    },
                    want_dx,
                );
            }
            if want_dx {
                let width = 2 * h;
                let dx_f = dxs[0].take().expect("dense input gradient");
                let dx_r = dxs[1].take().expect("dense input gradient");
                dy = dx_f;
                for row in 0..pk.rows() {
                    let rr = pk.rev[row];
                    for k in 0..width {
                        dy[row * width + k] += dx_r[rr * width + k];
                    }
                }
            }
        }
        for (name, g) in self.params.names().iter().zip(&grads) {
            g.check_finite(&format!("gradient of {name}"))?;
        }
        Ok((loss, grads))
    }
}

/// Cell parameters usable by [`bidi_layer`].
pub trait CellParams<F> {
    const KIND: CellKind;
    fn parts(&self) -> (&Tensor<F>, &Tensor<F>, &Tensor<F>);
}

impl<F> CellParams<F> for LstmCellParams<F> {
    const KIND: CellKind = CellKind::Lstm;
    fn parts(&self) -> (&Tensor<F>, &Tensor<F>, &Tensor<F>) {
        (&self.w, &self.u, &self.b)
    }
}

impl<F> CellParams<F> for GruCellParams<F> {
    const KIND: CellKind = CellKind::Gru;
    fn parts(&self) -> (&Tensor<F>, &Tensor<F>, &Tensor<F>) {
        (&self.w, &self.u, &self.b)
    }
}

/// One bidirectional layer over `inputs: [T × D]`, of which the first `mask`
/// rows are real. Returns `[T × 2H]` with forward states in the first half of
/// each row, backward states in the second and zeros from `mask` on.
pub fn bidi_layer<F: Real, P: CellParams<F>>(fwd: &P, bwd: &P, inputs: &Tensor<F>, mask: usize) -> Result<Tensor<F>> {
    let [steps, d] = inputs.shape() else {
        return Err(Error::Shape(format!(
            "inputs must be [T × D], got {:?}",
            inputs.shape()
        )));
    };
    let (steps, d) = (*steps, *d);
    if mask == 0 || mask > steps {
        return Err(Error::Config(format!("mask {mask} outside 1..={steps}")));
    }
    let (w, u, b) = fwd.parts();
    let gh = w.shape().first().copied().unwrap_or(0);
    let h = gh / P::KIND.gates();
    for (name, p) in [("forward", fwd.parts()), ("backward", bwd.parts())] {
        p.0.expect_shape(&format!("{name} W"), &[gh, d])?;
        p.1.expect_shape(&format!("{name} U"), &[gh, h])?;
        p.2.expect_shape(&format!("{name} b"), &[gh])?;
    }
    let _ = (u, b);
    let pk = Packing::new(&[mask])?;
    let x = &inputs.data()[..mask * d];
    let x_rev = gather_rows(x, d, &pk.rev);
    let run = |params: &P, xs: &[F]| {
        let (w, u, b) = params.parts();
        run_direction(P::KIND, h, &pk, InputRef::Dense(xs, d), &Weights { w, u, b })
    };
    let f = run(fwd, x);
    let r = run(bwd, &x_rev);
    let mut out = Tensor::zeros(vec![steps, 2 * h]);
    let o = out.data_mut();
    for t in 0..mask {
        o[t * 2 * h..t * 2 * h + h].copy_from_slice(&f.h[t * h..(t + 1) * h]);
        let rr = pk.rev[t];
        o[t * 2 * h + h..(t + 1) * 2 * h].copy_from_slice(&r.h[rr * h..(rr + 1) * h]);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::cell::{gru_step, lstm_step};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rand_tensor(rng: &mut ChaCha8Rng, shape: Vec<usize>, scale: f64) -> Tensor<f64> {
        let n = shape.iter().product();
        Tensor::new(shape, (0..n).map(|_| rng.gen_range(-scale..scale)).collect()).unwrap()
    }

    fn lstm_params(rng: &mut ChaCha8Rng, h: usize, d: usize) -> LstmCellParams<f64> {
        LstmCellParams {
            w: rand_tensor(rng, vec![4 * h, d], 0.8),
            u: rand_tensor(rng, vec![4 * h, h], 0.8),
            b: rand_tensor(rng, vec![4 * h], 0.3),
        }
    }

    fn gru_params(rng: &mut ChaCha8Rng, h: usize, d: usize) -> GruCellParams<f64> {
        GruCellParams {
            w: rand_tensor(rng, vec![3 * h, d], 0.8),
            u: rand_tensor(rng, vec![3 * h, h], 0.8),
            b: rand_tensor(rng, vec![3 * h], 0.3),
        }
    }

    fn row(t: &Tensor<f64>, i: usize) -> Tensor<f64> {
        let d = t.shape()[1];
        Tensor::from_vec(t.data()[i * d..(i + 1) * d].to_vec())
    }

    #[test]
    fn packed_lstm_layer_matches_step_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let (h, d, steps, mask) = (4, 3, 7, 5);
        let fwd = lstm_params(&mut rng, h, d);
        let bwd = lstm_params(&mut rng, h, d);
        let x = rand_tensor(&mut rng, vec![steps, d], 1.0);
        let out = bidi_layer(&fwd, &bwd, &x, mask).unwrap();

        let mut hs = Tensor::zeros(vec![h]);
        let mut cs = Tensor::zeros(vec![h]);
        for t in 0..mask {
            (hs, cs) = lstm_step(&fwd, &row(&x, t), &hs, &cs).unwrap();
            for j in 0..h {
                assert!((out.data()[t * 2 * h + j] - hs.data()[j]).abs() < 1e-14);
            }
        }
        let mut hs = Tensor::zeros(vec![h]);
        let mut cs = Tensor::zeros(vec![h]);
        for t in (0..mask).rev() {
            (hs, cs) = lstm_step(&bwd, &row(&x, t), &hs, &cs).unwrap();
            for j in 0..h {
                assert!((out.data()[t * 2 * h + h + j] - hs.data()[j]).abs() < 1e-14);
            }
        }
        assert!(out.data()[mask * 2 * h..].iter().all(|v| *v == 0.0));
    }

    #[test]
    fn packed_gru_layer_matches_step_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let (h, d, steps) = (3, 2, 6);
        let fwd = gru_params(&mut rng, h, d);
        let bwd = gru_params(&mut rng, h, d);
        let x = rand_tensor(&mut rng, vec![steps, d], 1.0);
        let out = bidi_layer(&fwd, &bwd, &x, steps).unwrap();
        let mut hs = Tensor::zeros(vec![h]);
        for t in 0..steps {
            hs = gru_step(&fwd, &row(&x, t), &hs).unwrap();
            for j in 0..h {
                assert!((out.data()[t * 2 * h + j] - hs.data()[j]).abs() < 1e-14);
            }
        }
        let mut hs = Tensor::zeros(vec![h]);
        for t in (0..steps).rev() {
            hs = gru_step(&bwd, &row(&x, t), &hs).unwrap();
            for j in 0..h {
                assert!((out.data()[t * 2 * h + h + j] - hs.data()[j]).abs() < 1e-14);
            }
        }
    }

    #[test]
    fn bidi_mask_one_and_zero_params() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let (h, d) = (2, 3);
        let fwd = lstm_params(&mut rng, h, d);
        let bwd = lstm_params(&mut rng, h, d);
        let x = rand_tensor(&mut rng, vec![4, d], 1.0);
        let out = bidi_layer(&fwd, &bwd, &x, 1).unwrap();
        let zero = Tensor::zeros(vec![h]);
        let (hf, _) = lstm_step(&fwd, &row(&x, 0), &zero, &zero).unwrap();
        let (hb, _) = lstm_step(&bwd, &row(&x, 0), &zero, &zero).unwrap();
        for j in 0..h {
            assert!((out.data()[j] - hf.data()[j]).abs() < 1e-14);
            assert!((out.data()[h + j] - hb.data()[j]).abs() < 1e-14);
        }

        let z = LstmCellParams {
            w: Tensor::zeros(vec![4 * h, d]),
            u: Tensor::zeros(vec![4 * h, h]),
            b: Tensor::zeros(vec![4 * h]),
        };
        let out = bidi_layer(&z, &z, &x, 4).unwrap();
        assert!(out.data().iter().all(|v| *v == 0.0));
        assert!(matches!(bidi_layer(&z, &z, &x, 0), Err(Error::Config(_))));
    }

    #[test]
    fn palindrome_with_shared_params_is_mirror_symmetric() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let (h, d) = (3, 4);
        let p = lstm_params(&mut rng, h, d);
        let rows: Vec<Tensor<f64>> = (0..3).map(|_| rand_tensor(&mut rng, vec![d], 1.0)).collect();
        // a b c b a
        let seq = [0, 1, 2, 1, 0];
        let data: Vec<f64> = seq.iter().flat_map(|&i| rows[i].data().to_vec()).collect();
        let x = Tensor::new(vec![5, d], data).unwrap();
        let out = bidi_layer(&p, &p, &x, 5).unwrap();
        let o = out.data();
        for t in 0..5 {
            let m = 4 - t;
            for j in 0..h {
                assert!((o[t * 2 * h + j] - o[m * 2 * h + h + j]).abs() < 1e-14);
            }
        }
    }

    #[test]
    fn backward_requires_forward() {
        let arch = Architecture {
            cell: CellKind::Lstm,
            input_size: 3,
            hidden: 2,
            layers: 2,
        };
        let mut net = Network::new(arch, ParamSet::<f64>::zeros(&arch)).unwrap();
        assert!(net.backward(&[vec![0.0]]).is_err());
        net.forward(&BatchInput::OneHot(vec![vec![0]])).unwrap();
        assert!(net.backward(&[vec![0.0]]).is_ok());
        assert!(net.backward(&[vec![0.0]]).is_err());
    }

    #[test]
    fn zero_network_predicts_one_half() {
        let arch = Architecture {
            cell: CellKind::Gru,
            input_size: 5,
            hidden: 3,
            layers: 2,
        };
        let mut net = Network::new(arch, ParamSet::<f32>::zeros(&arch)).unwrap();
        net.forward(&BatchInput::OneHot(vec![vec![0, 1, 2], vec![4]])).unwrap();
        let p = net.probabilities().unwrap();
        assert_eq!(p, vec![vec![0.5; 3], vec![0.5]]);
    }

    #[test]
    fn wrong_architecture_is_a_shape_error() {
        let lstm = Architecture {
            cell: CellKind::Lstm,
            input_size: 5,
            hidden: 3,
            layers: 2,
        };
        let gru = Architecture {
            cell: CellKind::Gru,
            ..lstm
        };
        let params = ParamSet::<f32>::zeros(&gru);
        assert!(matches!(Network::new(lstm, params), Err(Error::Shape(_))));
    }

    fn grad_check(cell: CellKind, layers: usize, seed: u64) -> f64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let arch = Architecture {
            cell,
            input_size: 5,
            hidden: 3,
            layers,
        };
        let mut params = ParamSet::<f64>::init(&arch, &mut rng).unwrap();
        for t in params.tensors_mut() {
            for v in t.data_mut() {
                *v += rng.gen_range(-0.5..0.5);
            }
        }
        let lens = [4, 6, 1];
        let input = BatchInput::OneHot(
            lens.iter()
                .map(|&l| (0..l).map(|_| rng.gen_range(0..5)).collect())
                .collect(),
        );
        let labels: Vec<Vec<f64>> = lens
            .iter()
            .map(|&l| (0..l).map(|_| f64::from(rng.gen_range(0..2u8))).collect())
            .collect();
        let mut net = Network::new(arch, params).unwrap();
        net.forward(&input).unwrap();
        let (_, grads) = net.backward(&labels).unwrap();
        let loss_at = |net: &mut Network<f64>| {
            net.forward(&input).unwrap();
            net.loss(&labels).unwrap()
        };
        let step = 1e-5;
        let mut worst = 0.0f64;
        for (i, grad) in grads.iter().enumerate() {
            for k in 0..grad.len() {
                let orig = net.params.tensors()[i].data()[k];
                net.params.tensors_mut()[i].data_mut()[k] = orig + step;
                let plus = loss_at(&mut net);
                net.params.tensors_mut()[i].data_mut()[k] = orig - step;
                let minus = loss_at(&mut net);
                net.params.tensors_mut()[i].data_mut()[k] = orig;
                let numeric = (plus - minus) / (2.0 * step);
                let analytic = grad.data()[k];
                let rel = (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-6);
                worst = worst.max(rel);
            }
        }
        worst
    }

    #[test]
    fn lstm_gradients_match_finite_differences() {
        for seed in 0..3 {
            let err = grad_check(CellKind::Lstm, 2, seed);
            assert!(err < 1e-4, "seed {seed}: {err}");
        }
    }

    #[test]
    fn gru_gradients_match_finite_differences() {
        for seed in 0..3 {
            let err = grad_check(CellKind::Gru, 2, seed);
            assert!(err < 1e-4, "seed {seed}: {err}");
        }
    }

    #[test]
    fn probabilities_follow_input_order() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let arch = Architecture {
            cell: CellKind::Lstm,
            input_size: 4,
            hidden: 3,
            layers: 1,
        };
        let params = ParamSet::<f64>::init(&arch, &mut rng).unwrap();
        let mut net = Network::new(arch, params).unwrap();
        let a = vec![0, 1, 2];
        let b = vec![3, 3, 0, 1, 2];
        net.forward(&BatchInput::OneHot(vec![a.clone()])).unwrap();
        let pa = net.probabilities().unwrap().remove(0);
        net.forward(&BatchInput::OneHot(vec![b.clone()])).unwrap();
        let pb = net.probabilities().unwrap().remove(0);
        net.forward(&BatchInput::OneHot(vec![a, b])).unwrap();
        let both = net.probabilities().unwrap();
        for (x, y) in both[0].iter().zip(&pa).chain(both[1].iter().zip(&pb)) {
            assert!((x - y).abs() < 1e-12);
        }
    }
}
