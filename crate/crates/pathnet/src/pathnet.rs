//! The super network: an `L × M` grid of linear+ReLU modules, one linear
//! readout head per task, and a frozen mask.
//!
//! A [`PathGenotype`] picks up to `N` modules per layer. Only those modules
//! (and the task head) take part in the forward pass, and only the
//! non-frozen ones among them are updated by the backward pass.

use std::collections::{BTreeMap, BTreeSet};
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{
    argmax_rows, glorot_uniform, input_grad, linear_backward, linear_forward, relu,
    relu_backward, sgd_step_slice, softmax_xent, Matrix, RngStream,
};

/// Shape of the module grid.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NetConfig {
    pub layers: usize,
    pub modules_per_layer: usize,
    pub neurons_per_module: usize,
    /// Maximum number of distinct modules a path may activate per layer.
    pub max_active: usize,
    pub input_dim: usize,
    /// Keep the most recently frozen path active in every forward pass.
    #[serde(default)]
    pub always_active_frozen: bool,
}

impl NetConfig {
    /// 3 layers of 10 modules, 20 neurons each, at most 3 active per layer.
    pub fn mnist() -> Self {
        NetConfig {
            layers: 3,
            modules_per_layer: 10,
            neurons_per_module: 20,
            max_active: 3,
            input_dim: 28 * 28,
            always_active_frozen: false,
        }
    }

    /// The wider 3 × 20 grid with up to 5 active modules per layer.
    pub fn large(input_dim: usize) -> Self {
        NetConfig {
            layers: 3,
            modules_per_layer: 20,
            neurons_per_module: 20,
            max_active: 5,
            input_dim,
            always_active_frozen: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |path: &str, reason: &str| {
            Err(Error::Config {
                path: path.to_string(),
                reason: reason.to_string(),
            })
        };
        if self.layers == 0 {
            return bad("net.layers", "must be at least 1");
        }
        if self.max_active == 0 || self.max_active > self.modules_per_layer {
            return bad("net.max_active", "must satisfy 1 <= max_active <= modules_per_layer");
        }
        if self.neurons_per_module == 0 {
            return bad("net.neurons_per_module", "must be at least 1");
        }
        if self.input_dim == 0 {
            return bad("net.input_dim", "must be at least 1");
        }
        Ok(())
    }

    pub fn module_count(&self) -> usize {
        self.layers * self.modules_per_layer
    }

    fn module_input_dim(&self, layer: usize) -> usize {
        if layer == 0 {
            self.input_dim
        } else {
            self.neurons_per_module
        }
    }
}

/// `N × L` module indices, stored per layer.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct PathGenotype {
    layers: Vec<Vec<usize>>,
}

impl PathGenotype {
    pub fn from_layers(layers: Vec<Vec<usize>>) -> Self {
        PathGenotype { layers }
    }

    /// Every entry drawn uniformly from `[0, M)`.
    pub fn random(cfg: &NetConfig, rng: &mut RngStream) -> Self {
        let layers = (0..cfg.layers)
            .map(|_| {
                (0..cfg.max_active)
                    .map(|_| rng.gen_range(0..cfg.modules_per_layer))
                    .collect()
            })
            .collect();
        PathGenotype { layers }
    }

    /// Modules `0..N` in every layer: the fixed maximum-size path used by
    /// the control arms.
    pub fn fixed_prefix(cfg: &NetConfig) -> Self {
        PathGenotype {
            layers: vec![(0..cfg.max_active).collect(); cfg.layers],
        }
    }

    pub fn num_layers(&self) -> usize {
        self.layers.len()
    }

    pub fn layer(&self, layer: usize) -> &[usize] {
        &self.layers[layer]
    }

    pub fn layers(&self) -> &[Vec<usize>] {
        &self.layers
    }

    pub(crate) fn layers_mut(&mut self) -> &mut [Vec<usize>] {
        &mut self.layers
    }

    /// Distinct modules named in `layer`, ascending.
    pub fn active_set(&self, layer: usize) -> Vec<usize> {
        let set: BTreeSet<usize> = self.layers[layer].iter().copied().collect();
        set.into_iter().collect()
    }

    /// All distinct `(layer, module)` pairs on the path.
    pub fn active_pairs(&self) -> BTreeSet<(usize, usize)> {
        self.layers
            .iter()
            .enumerate()
            .flat_map(|(l, row)| row.iter().map(move |&m| (l, m)))
            .collect()
    }

    pub fn check(&self, cfg: &NetConfig) -> Result<()> {
        if self.layers.len() != cfg.layers {
            return Err(Error::dim("PathGenotype", cfg.layers, self.layers.len()));
        }
        for (l, row) in self.layers.iter().enumerate() {
            if row.is_empty() || row.len() > cfg.max_active {
                return Err(Error::Input(format!(
                    "layer {l} has {} entries, expected 1..={}",
                    row.len(),
                    cfg.max_active
                )));
            }
            if let Some(&m) = row.iter().find(|&&m| m >= cfg.modules_per_layer) {
                return Err(Error::Input(format!(
                    "layer {l} names module {m}, grid has {}",
                    cfg.modules_per_layer
                )));
            }
        }
        Ok(())
    }
}

/// One linear unit: `out × in` weights plus bias.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Module {
    pub weight: Matrix,
    pub bias: Vec<f64>,
}

impl Module {
    /// Glorot-uniform weights, zero bias.
    pub fn init(out_dim: usize, in_dim: usize, rng: &mut RngStream) -> Self {
        Module {
            weight: glorot_uniform(out_dim, in_dim, rng),
            bias: vec![0.0; out_dim],
        }
    }

    pub fn zeros(out_dim: usize, in_dim: usize) -> Self {
        Module {
            weight: Matrix::zeros(out_dim, in_dim),
            bias: vec![0.0; out_dim],
        }
    }

    pub fn in_dim(&self) -> usize {
        self.weight.cols()
    }

    pub fn out_dim(&self) -> usize {
        self.weight.rows()
    }

    pub fn param_count(&self) -> usize {
        self.weight.as_slice().len() + self.bias.len()
    }

    fn apply(&mut self, grad: &ModuleGrad, lr: f64) -> Result<()> {
        sgd_step_slice(self.weight.as_mut_slice(), grad.weight.as_slice(), lr)?;
        sgd_step_slice(&mut self.bias, &grad.bias, lr)
    }
}

/// Gradient of one module's parameters.
#[derive(Clone, Debug)]
pub struct ModuleGrad {
    pub weight: Matrix,
    pub bias: Vec<f64>,
}

/// Gradients produced by one backward pass: the task head plus every
/// active, non-frozen module.
#[derive(Clone, Debug)]
pub struct PathGradients {
    pub task: String,
    pub head: ModuleGrad,
    pub modules: Vec<((usize, usize), ModuleGrad)>,
}

/// Forward caches needed by the backward pass.
#[derive(Clone, Debug)]
pub struct PathActivation {
    task: String,
    /// Active module indices per layer, after dedup and always-active union.
    active: Vec<Vec<usize>>,
    /// `inputs[l]` feeds layer `l`; `inputs[L]` feeds the head.
    inputs: Vec<Matrix>,
    /// Pre-activations, parallel to `active`.
    pre: Vec<Vec<Matrix>>,
}

impl PathActivation {
    pub fn active(&self) -> &[Vec<usize>] {
        &self.active
    }

    /// The summed output of the last layer, i.e. the head's input.
    pub fn features(&self) -> &Matrix {
        self.inputs.last().expect("at least the input batch")
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Head {
    pub classes: usize,
    pub module: Module,
}

/// All module parameters, per-task heads and the frozen mask.
#[derive(Clone, Debug, PartialEq)]
pub struct ParameterGrid {
    config: NetConfig,
    modules: Vec<Module>,
    heads: BTreeMap<String, Head>,
    frozen: Vec<bool>,
    always_active: Option<PathGenotype>,
}

impl ParameterGrid {
    pub fn new(config: NetConfig, rng: &mut RngStream) -> Result<Self> {
        config.validate()?;
        let modules = (0..config.module_count())
            .map(|i| {
                let layer = i / config.modules_per_layer;
                Module::init(
                    config.neurons_per_module,
                    config.module_input_dim(layer),
                    rng,
                )
            })
            .collect();
        let frozen = vec![false; config.module_count()];
        Ok(ParameterGrid {
            config,
            modules,
            heads: BTreeMap::new(),
            frozen,
            always_active: None,
        })
    }

    pub fn config(&self) -> &NetConfig {
        &self.config
    }

    fn index(&self, layer: usize, module: usize) -> usize {
        debug_assert!(layer < self.config.layers && module < self.config.modules_per_layer);
        layer * self.config.modules_per_layer + module
    }

    pub fn module(&self, layer: usize, module: usize) -> &Module {
        &self.modules[self.index(layer, module)]
    }

    /// Direct mutable access; bypasses the frozen mask.
    pub fn module_mut(&mut self, layer: usize, module: usize) -> &mut Module {
        let i = self.index(layer, module);
        &mut self.modules[i]
    }

    pub fn modules(&self) -> &[Module] {
        &self.modules
    }

    pub fn is_frozen(&self, layer: usize, module: usize) -> bool {
        self.frozen[self.index(layer, module)]
    }

    pub fn frozen_mask(&self) -> &[bool] {
        &self.frozen
    }

    pub fn frozen_count(&self) -> usize {
        self.frozen.iter().filter(|&&f| f).count()
    }

    pub fn frozen_per_layer(&self) -> Vec<usize> {
        self.frozen
            .chunks(self.config.modules_per_layer)
            .map(|c| c.iter().filter(|&&f| f).count())
            .collect()
    }

    /// Frozen modules as `(layer, module)` pairs.
    pub fn frozen_modules(&self) -> Vec<(usize, usize)> {
        let m = self.config.modules_per_layer;
        self.frozen
            .iter()
            .enumerate()
            .filter(|(_, &f)| f)
            .map(|(i, _)| (i / m, i % m))
            .collect()
    }

    pub fn always_active(&self) -> Option<&PathGenotype> {
        self.always_active.as_ref()
    }

    /// Adds a freshly initialized readout for `task`, replacing any existing one.
    pub fn add_head(&mut self, task: &str, classes: usize, rng: &mut RngStream) {
        let module = Module::init(classes, self.config.neurons_per_module, rng);
        self.heads
            .insert(task.to_string(), Head { classes, module });
    }

    pub fn has_head(&self, task: &str) -> bool {
        self.heads.contains_key(task)
    }

    pub fn head(&self, task: &str) -> Option<&Head> {
        self.heads.get(task)
    }

    pub fn head_mut(&mut self, task: &str) -> Option<&mut Head> {
        self.heads.get_mut(task)
    }

    pub fn heads(&self) -> &BTreeMap<String, Head> {
        &self.heads
    }

    /// Marks every module on `path` as frozen. Cumulative and idempotent.
    /// With `always_active_frozen` set, the path also becomes the
    /// always-active path for later forward passes.
    pub fn freeze_path(&mut self, path: &PathGenotype) {
        for (l, m) in path.active_pairs() {
            let i = self.index(l, m);
            self.frozen[i] = true;
        }
        if self.config.always_active_frozen {
            self.always_active = Some(path.clone());
        }
    }

    /// Redraws every non-frozen module. Heads are left alone; heads for new
    /// tasks are created fresh by [`ParameterGrid::add_head`].
    pub fn reinit_unfrozen(&mut self, rng: &mut RngStream) {
        let cfg = self.config.clone();
        for (i, module) in self.modules.iter_mut().enumerate() {
            if self.frozen[i] {
                continue;
            }
            let layer = i / cfg.modules_per_layer;
            *module = Module::init(cfg.neurons_per_module, cfg.module_input_dim(layer), rng);
        }
    }

    /// Modules that take part in a forward pass of `path` at `layer`.
    pub fn effective_active_set(&self, path: &PathGenotype, layer: usize) -> Vec<usize> {
        let mut set: BTreeSet<usize> = path.layer(layer).iter().copied().collect();
        if let Some(extra) = &self.always_active {
            set.extend(extra.layer(layer).iter().copied());
        }
        set.into_iter().collect()
    }

    pub fn forward(
        &self,
        path: &PathGenotype,
        task: &str,
        x: &Matrix,
    ) -> Result<(Matrix, PathActivation)> {
        let head = self
            .heads
            .get(task)
            .ok_or_else(|| Error::State(format!("no readout head for task `{task}`")))?;
        path.check(&self.config)?;
        if x.cols() != self.config.input_dim {
            return Err(Error::dim(
                "ParameterGrid::forward",
                format!("{} input features", self.config.input_dim),
                format!("{}", x.cols()),
            ));
        }
        let layers = self.config.layers;
        let mut active = Vec::with_capacity(layers);
        let mut inputs = Vec::with_capacity(layers + 1);
        let mut pre = Vec::with_capacity(layers);
        inputs.push(x.clone());
        for l in 0..layers {
            let set = self.effective_active_set(path, l);
            let input = &inputs[l];
            let mut sum = Matrix::zeros(x.rows(), self.config.neurons_per_module);
            let mut layer_pre = Vec::with_capacity(set.len());
            for &m in &set {
                let module = self.module(l, m);
                let z = linear_forward(&module.weight, &module.bias, input)?;
                sum.add_assign(&relu(&z))?;
                layer_pre.push(z);
            }
            active.push(set);
            pre.push(layer_pre);
            inputs.push(sum);
        }
        let logits = linear_forward(&head.module.weight, &head.module.bias, &inputs[layers])?;
        Ok((
            logits,
            PathActivation {
                task: task.to_string(),
                active,
                inputs,
                pre,
            },
        ))
    }

    /// Backpropagates `dlogits` through the head and the active modules.
    ///
    /// Frozen modules pass gradient through to earlier layers but get no
    /// entry in the result.
    pub fn gradients(&self, act: &PathActivation, dlogits: &Matrix) -> Result<PathGradients> {
        let head = self
            .heads
            .get(&act.task)
            .ok_or_else(|| Error::State(format!("no readout head for task `{}`", act.task)))?;
        let layers = self.config.layers;
        let (hw, hb, dh) = linear_backward(&head.module.weight, &act.inputs[layers], dlogits, true)?;
        let mut upstream = dh.expect("requested");
        let mut modules = Vec::new();
        for l in (0..layers).rev() {
            let need_input_grad = l > 0;
            let mut down = need_input_grad.then(|| Matrix::zeros(dlogits.rows(), self.config.neurons_per_module));
            for (&m, z) in act.active[l].iter().zip(&act.pre[l]) {
                let module = self.module(l, m);
                let dz = relu_backward(z, &upstream);
                if self.is_frozen(l, m) {
                    if let Some(down) = down.as_mut() {
                        down.add_assign(&input_grad(&module.weight, &dz))?;
                    }
                    continue;
                }
                let (dw, db, dx) = linear_backward(&module.weight, &act.inputs[l], &dz, need_input_grad)?;
                if let (Some(down), Some(dx)) = (down.as_mut(), dx) {
                    down.add_assign(&dx)?;
                }
                modules.push(((l, m), ModuleGrad { weight: dw, bias: db }));
            }
            if let Some(down) = down {
                upstream = down;
            }
        }
        Ok(PathGradients {
            task: act.task.clone(),
            head: ModuleGrad { weight: hw, bias: hb },
            modules,
        })
    }

    /// SGD on the head and every non-frozen module named in `grads`.
    pub fn apply_gradients(&mut self, grads: &PathGradients, lr: f64) -> Result<()> {
        for ((l, m), g) in &grads.modules {
            if self.is_frozen(*l, *m) {
                continue;
            }
            self.module_mut(*l, *m).apply(g, lr)?;
        }
        let head = self
            .heads
            .get_mut(&grads.task)
            .ok_or_else(|| Error::State(format!("no readout head for task `{}`", grads.task)))?;
        head.module.apply(&grads.head, lr)
    }

    /// One backward pass plus SGD update. `act` must come from a forward
    /// pass on this grid with the same path and task.
    pub fn backward_and_step(&mut self, act: &PathActivation, dlogits: &Matrix, lr: f64) -> Result<()> {
        let grads = self.gradients(act, dlogits)?;
        self.apply_gradients(&grads, lr)
    }

    /// Forward, cross-entropy, backward and update on one mini-batch.
    /// Returns the number of examples classified correctly by the forward
    /// pass that preceded the update.
    pub fn train_batch(
        &mut self,
        path: &PathGenotype,
        task: &str,
        x: &Matrix,
        labels: &[usize],
        lr: f64,
    ) -> Result<usize> {
        let (logits, act) = self.forward(path, task, x)?;
        let correct = count_correct(&logits, labels);
        let (_, dlogits) = softmax_xent(&logits, labels)?;
        self.backward_and_step(&act, &dlogits, lr)?;
        Ok(correct)
    }

    /// Overwrites a module's parameters; refused for frozen modules.
    pub fn copy_module(&mut self, layer: usize, src: usize, dst: usize) -> Result<()> {
        if self.is_frozen(layer, dst) {
            return Err(Error::State(format!("module ({layer}, {dst}) is frozen")));
        }
        let params = self.module(layer, src).clone();
        *self.module_mut(layer, dst) = params;
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        self.write_to(&mut w)?;
        w.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut r = BufReader::new(File::open(path)?);
        Self::read_from(&mut r)
    }

    /// Binary checkpoint: magic, version, JSON header, then every module
    /// and head as little-endian `f64` (weights row-major, then bias).
    pub fn write_to<W: Write>(&self, w: &mut W) -> Result<()> {
        let header = CheckpointHeader {
            config: self.config.clone(),
            heads: self
                .heads
                .iter()
                .map(|(k, h)| (k.clone(), h.classes))
                .collect(),
            frozen: self.frozen.clone(),
            always_active: self.always_active.clone(),
        };
        let header = serde_json::to_vec(&header)?;
        w.write_all(CHECKPOINT_MAGIC)?;
        w.write_u32::<LittleEndian>(CHECKPOINT_VERSION)?;
        w.write_u64::<LittleEndian>(header.len() as u64)?;
        w.write_all(&header)?;
        let modules = self.modules.iter().chain(self.heads.values().map(|h| &h.module));
        for m in modules {
            for &v in m.weight.as_slice().iter().chain(&m.bias) {
                w.write_f64::<LittleEndian>(v)?;
            }
        }
        Ok(())
    }

    pub fn read_from<R: Read>(r: &mut R) -> Result<Self> {
        let mut r = CountingReader { inner: r, offset: 0 };
        let fmt = |offset: u64, reason: String| Error::Format {
            what: "grid checkpoint",
            offset,
            reason,
        };
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic)
            .map_err(|e| fmt(r.offset, e.to_string()))?;
        if &magic != CHECKPOINT_MAGIC {
            return Err(fmt(0, "bad magic".into()));
        }
        let version = r
            .read_u32::<LittleEndian>()
            .map_err(|e| fmt(r.offset, e.to_string()))?;
        if version != CHECKPOINT_VERSION {
            return Err(fmt(8, format!("unsupported version {version}")));
        }
        let len = r
            .read_u64::<LittleEndian>()
            .map_err(|e| fmt(r.offset, e.to_string()))?;
        if len > 1 << 30 {
            return Err(fmt(12, format!("implausible header length {len}")));
        }
        let mut header = vec![0u8; len as usize];
        let header_at = r.offset;
        r.read_exact(&mut header)
            .map_err(|e| fmt(r.offset, e.to_string()))?;
        let header: CheckpointHeader =
            serde_json::from_slice(&header).map_err(|e| fmt(header_at, e.to_string()))?;
        let cfg = header.config;
        cfg.validate().map_err(|e| fmt(header_at, e.to_string()))?;
        if header.frozen.len() != cfg.module_count() {
            return Err(fmt(header_at, "frozen mask length does not match grid".into()));
        }
        let read_module = |r: &mut CountingReader<&mut R>, out: usize, inp: usize| -> Result<Module> {
            let mut vals = vec![0.0; out * inp + out];
            for v in vals.iter_mut() {
                *v = r
                    .read_f64::<LittleEndian>()
                    .map_err(|e| fmt(r.offset, format!("truncated parameters: {e}")))?;
            }
            let bias = vals.split_off(out * inp);
            Ok(Module {
                weight: Matrix::from_vec(out, inp, vals)?,
                bias,
            })
        };
        let mut modules = Vec::with_capacity(cfg.module_count());
        for i in 0..cfg.module_count() {
            let layer = i / cfg.modules_per_layer;
            modules.push(read_module(&mut r, cfg.neurons_per_module, cfg.module_input_dim(layer))?);
        }
        let mut heads = BTreeMap::new();
        for (task, classes) in header.heads {
            let module = read_module(&mut r, classes, cfg.neurons_per_module)?;
            heads.insert(task, Head { classes, module });
        }
        let mut probe = [0u8; 1];
        if r.read(&mut probe)? != 0 {
            return Err(fmt(r.offset - 1, "trailing bytes after parameters".into()));
        }
        Ok(ParameterGrid {
            config: cfg,
            modules,
            heads,
            frozen: header.frozen,
            always_active: header.always_active,
        })
    }
}

pub fn count_correct(logits: &Matrix, labels: &[usize]) -> usize {
    argmax_rows(logits)
        .iter()
        .zip(labels)
        .filter(|(p, l)| p == l)
        .count()
}

const CHECKPOINT_MAGIC: &[u8; 8] = b"PATHNETG";
const CHECKPOINT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct CheckpointHeader {
    config: NetConfig,
    heads: Vec<(String, usize)>,
    frozen: Vec<bool>,
    always_active: Option<PathGenotype>,
}

struct CountingReader<R> {
    inner: R,
    offset: u64,
}

impl<R: Read> Read for CountingReader<R> {
    fn read(&mut self, buf: &mut [u8]) -> std::io::Result<usize> {
        let n = self.inner.read(buf)?;
        self.offset += n as u64;
        Ok(n)
    }
}
