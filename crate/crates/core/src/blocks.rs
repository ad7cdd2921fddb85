//! Res2Net and channel-wise gated Res2Net blocks, and the backbone that
//! stacks them into a two-class detector.
//!
//! Inside a block the entry 1x1 convolution output is split into `s` groups
//! `x_1..x_s` of `C` channels each and transformed as
//!
//! ```text
//! y_1 = x_1
//! y_2 = K_2(x_2)
//! y_i = K_i(x_i + z_{i-1})        2 < i <= s
//! ```
//!
//! where `z_{i-1} = y_{i-1}` for plain Res2Net and `z_{i-1} = y_{i-1} * a_{i-1}`
//! (channel-wise) for the gated variants. The groups are concatenated, passed
//! through the exit 1x1 convolution and the SE block, and added to the shortcut.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use rand::Rng;

use crate::config::KvMap;
use crate::error::{Error, Result};
use crate::gates::{gate_param_count, GateKind, GateModule};
use crate::layers::{ConvLayer, ConvOptions, Dense, GateRecord, Mode, Module, Param, SeBlock, Session};
use crate::tensor::{Real, Tape, Tensor, Var};

/// Network variant: plain Res2Net or one of the gated forms.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Arch {
    Res2Net,
    Scg,
    Mcg,
    Mlcg,
}

impl Arch {
    pub const ALL: [Arch; 4] = [Arch::Res2Net, Arch::Scg, Arch::Mcg, Arch::Mlcg];

    pub fn gate(self) -> Option<GateKind> {
        match self {
            Arch::Res2Net => None,
            Arch::Scg => Some(GateKind::Scg),
            Arch::Mcg => Some(GateKind::Mcg),
            Arch::Mlcg => Some(GateKind::Mlcg),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Arch::Res2Net => "res2net",
            Arch::Scg => "scg",
            Arch::Mcg => "mcg",
            Arch::Mlcg => "mlcg",
        }
    }
}

impl fmt::Display for Arch {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Arch {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "res2net" | "none" => Ok(Arch::Res2Net),
            other => other.parse::<GateKind>().map(|g| match g {
                GateKind::Scg => Arch::Scg,
                GateKind::Mcg => Arch::Mcg,
                GateKind::Mlcg => Arch::Mlcg,
            }),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BlockConfig {
    pub in_channels: usize,
    /// Output channels, `scale * C`.
    pub width: usize,
    pub scale: usize,
    pub gate: Option<GateKind>,
    /// MLCG latent reduction `r`.
    pub reduction: usize,
    pub se: bool,
    pub se_reduction: usize,
    pub stride: usize,
    /// Batch norm (+ ReLU) after every convolution, ReLU after the residual sum.
    pub norm_act: bool,
}

impl BlockConfig {
    pub fn group_channels(&self) -> usize {
        self.width / self.scale
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.scale < 2 {
            return fail(format!("scale must be >= 2, got {}", self.scale));
        }
        if self.width == 0 || !self.width.is_multiple_of(self.scale) {
            return fail(format!("width {} not divisible by scale {}", self.width, self.scale));
        }
        if self.stride == 0 || self.in_channels == 0 {
            return fail("stride and input channels must be positive".into());
        }
        if self.gate == Some(GateKind::Mlcg) && (self.reduction == 0 || !self.group_channels().is_multiple_of(self.reduction)) {
            return fail(format!("reduction {} must divide the group width {}", self.reduction, self.group_channels()));
        }
        if self.se && (self.se_reduction == 0 || !self.width.is_multiple_of(self.se_reduction)) {
            return fail(format!("SE reduction {} must divide width {}", self.se_reduction, self.width));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct Res2NetBlock<T> {
    pub name: String,
    pub cfg: BlockConfig,
    pub entry: ConvLayer<T>,
    /// `K_2..K_s`.
    pub convs: Vec<ConvLayer<T>>,
    /// Gates producing `a_2..a_{s-1}`; empty for plain Res2Net.
    pub gates: Vec<GateModule<T>>,
    pub exit: ConvLayer<T>,
    pub se: Option<SeBlock<T>>,
    /// Projection shortcut; `None` means identity.
    pub shortcut: Option<ConvLayer<T>>,
}

impl<T: Real> Res2NetBlock<T> {
    pub fn new(name: &str, cfg: BlockConfig, rng: &mut impl Rng) -> Result<Self> {
        cfg.validate()?;
        let c = cfg.group_channels();
        let act = ConvOptions { bias: false, batch_norm: cfg.norm_act, relu: cfg.norm_act };
        let linear = ConvOptions { bias: false, batch_norm: cfg.norm_act, relu: false };
        let entry = ConvLayer::new(&format!("{name}.entry"), cfg.in_channels, cfg.width, 1, cfg.stride, act, rng);
        let convs = (2..=cfg.scale).map(|i| ConvLayer::new(&format!("{name}.k{i}"), c, c, 3, 1, act, rng)).collect();
        let gates = match cfg.gate {
            Some(kind) => (2..cfg.scale)
                .map(|i| GateModule::new(kind, &format!("{name}.gate{i}"), c, cfg.reduction, rng))
                .collect::<Result<_>>()?,
            None => Vec::new(),
        };
        let exit = ConvLayer::new(&format!("{name}.exit"), cfg.width, cfg.width, 1, 1, linear, rng);
        let se =
            if cfg.se { Some(SeBlock::new(&format!("{name}.se"), cfg.width, cfg.se_reduction, rng)?) } else { None };
        let shortcut = (cfg.in_channels != cfg.width || cfg.stride != 1).then(|| {
            ConvLayer::new(&format!("{name}.shortcut"), cfg.in_channels, cfg.width, 1, cfg.stride, linear, rng)
        });
        Ok(Self { name: name.to_string(), cfg, entry, convs, gates, exit, se, shortcut })
    }

    /// The same block with its gates removed (a plain Res2Net block sharing
    /// every other weight).
    pub fn without_gates(&self) -> Self {
        let mut b = self.clone();
        b.gates.clear();
        b.cfg.gate = None;
        b
    }

    /// The hierarchical group transform: maps `x_1..x_s` to `y_1..y_s`.
    pub fn multiscale<'t>(&self, s: &mut Session<'t, T>, groups: &[Var<'t, T>]) -> Result<Vec<Var<'t, T>>> {
        let scale = self.cfg.scale;
        if groups.len() != scale {
            return Err(Error::Dimension(format!("expected {scale} groups, got {}", groups.len())));
        }
        let mut ys = Vec::with_capacity(scale);
        ys.push(groups[0]);
        ys.push(self.convs[0].forward(s, groups[1])?);
        for i in 2..scale {
            let prev = ys[i - 1];
            let carry = match self.gates.get(i - 2) {
                None => prev,
                Some(gate) => {
                    let a = match s.gate_override() {
                        Some(v) => {
                            let shape = prev.shape();
                            s.tape().constant(Tensor::full(&shape[..shape.len() - 2], v))
                        }
                        None => gate.forward(s, prev, groups[i])?,
                    };
                    s.record_gate(|| GateRecord { block: self.name.clone(), group: i, values: a.value() });
                    prev.channel_mul(a)?
                }
            };
            ys.push(self.convs[i - 1].forward(s, groups[i].add(carry)?)?);
        }
        Ok(ys)
    }

    pub fn forward<'t>(&self, s: &mut Session<'t, T>, x: Var<'t, T>) -> Result<Var<'t, T>> {
        let h = self.entry.forward(s, x)?;
        let groups = h.split_channels(self.cfg.scale)?;
        let ys = self.multiscale(s, &groups)?;
        let mut out = self.exit.forward(s, Var::concat_channels(&ys)?)?;
        if let Some(se) = &self.se {
            out = se.forward(s, out)?;
        }
        let shortcut = match &self.shortcut {
            Some(proj) => proj.forward(s, x)?,
            None => x,
        };
        let out = out.add(shortcut)?;
        Ok(if self.cfg.norm_act { out.relu() } else { out })
    }

    /// Plain-tensor eval-mode forward.
    pub fn apply(&self, x: &Tensor<T>, gate_override: Option<T>) -> Result<Tensor<T>> {
        let tape = Tape::new();
        let mut s = Session::new(&tape, Mode::Eval).with_gate_override(gate_override);
        Ok(self.forward(&mut s, tape.constant(x.clone()))?.value())
    }
}

impl<T: Real> Module<T> for Res2NetBlock<T> {
    fn visit(&self, f: &mut dyn FnMut(&Param<T>)) {
        self.entry.visit(f);
        self.convs.iter().for_each(|c| c.visit(f));
        self.gates.iter().for_each(|g| g.visit(f));
        self.exit.visit(f);
        if let Some(se) = &self.se {
            se.visit(f);
        }
        if let Some(sc) = &self.shortcut {
            sc.visit(f);
        }
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param<T>)) {
        self.entry.visit_mut(f);
        self.convs.iter_mut().for_each(|c| c.visit_mut(f));
        self.gates.iter_mut().for_each(|g| g.visit_mut(f));
        self.exit.visit_mut(f);
        if let Some(se) = &mut self.se {
            se.visit_mut(f);
        }
        if let Some(sc) = &mut self.shortcut {
            sc.visit_mut(f);
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct StageConfig {
    pub blocks: usize,
    pub width: usize,
    pub stride: usize,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BackboneConfig {
    /// Frequency bins `D` of the input feature map.
    pub input_bins: usize,
    /// Frames `T` of the input feature map.
    pub input_frames: usize,
    pub stem_channels: usize,
    pub stem_stride: usize,
    pub stages: Vec<StageConfig>,
    pub scale: usize,
    pub arch: Arch,
    pub reduction: usize,
    pub se: bool,
    pub se_reduction: usize,
    pub norm_act: bool,
    pub classes: usize,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        Self {
            input_bins: 432,
            input_frames: 400,
            stem_channels: 16,
            stem_stride: 2,
            stages: [16, 32, 64].into_iter().map(|width| StageConfig { blocks: 2, width, stride: 2 }).collect(),
            scale: 4,
            arch: Arch::Res2Net,
            reduction: 4,
            se: true,
            se_reduction: 4,
            norm_act: true,
            classes: 2,
        }
    }
}

fn join<I: IntoIterator<Item = usize>>(it: I) -> String {
    it.into_iter().map(|v| v.to_string()).collect::<Vec<_>>().join(",")
}

impl BackboneConfig {
    pub fn with_arch(mut self, arch: Arch) -> Self {
        self.arch = arch;
        self
    }

    /// Block configurations in network order.
    pub fn block_configs(&self) -> Vec<BlockConfig> {
        let mut out = Vec::new();
        let mut in_channels = self.stem_channels;
        for stage in &self.stages {
            for b in 0..stage.blocks {
                out.push(BlockConfig {
                    in_channels,
                    width: stage.width,
                    scale: self.scale,
                    gate: self.arch.gate(),
                    reduction: self.reduction,
                    se: self.se,
                    se_reduction: self.se_reduction,
                    stride: if b == 0 { stage.stride } else { 1 },
                    norm_act: self.norm_act,
                });
                in_channels = stage.width;
            }
        }
        out
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: &str| Err(Error::Config(m.to_string()));
        if self.input_bins == 0 || self.input_frames == 0 {
            return fail("input extents must be positive");
        }
        if self.stem_channels == 0 || self.stem_stride == 0 {
            return fail("stem channels and stride must be positive");
        }
        if self.stages.is_empty() || self.stages.iter().any(|s| s.blocks == 0) {
            return fail("need at least one stage, each with at least one block");
        }
        if self.classes < 2 {
            return fail("classifier needs at least two classes");
        }
        self.block_configs().iter().try_for_each(BlockConfig::validate)
    }

    /// Canonical key/value form, every field materialized.
    pub fn to_kv(&self) -> KvMap {
        let mut kv = KvMap::default();
        kv.set("arch", self.arch.name());
        kv.set("input_bins", self.input_bins);
        kv.set("input_frames", self.input_frames);
        kv.set("stem_channels", self.stem_channels);
        kv.set("stem_stride", self.stem_stride);
        kv.set("stage_blocks", join(self.stages.iter().map(|s| s.blocks)));
        kv.set("stage_widths", join(self.stages.iter().map(|s| s.width)));
        kv.set("stage_strides", join(self.stages.iter().map(|s| s.stride)));
        kv.set("scale", self.scale);
        kv.set("reduction", self.reduction);
        kv.set("se", self.se);
        kv.set("se_reduction", self.se_reduction);
        kv.set("norm_act", self.norm_act);
        kv.set("classes", self.classes);
        kv
    }

    /// Overrides fields of `self` with any keys present in `kv`.
    pub fn merge_kv(mut self, kv: &KvMap) -> Result<Self> {
        if let Some(a) = kv.get("arch") {
            self.arch = a.parse()?;
        }
        kv.update("input_bins", &mut self.input_bins)?;
        kv.update("input_frames", &mut self.input_frames)?;
        kv.update("stem_channels", &mut self.stem_channels)?;
        kv.update("stem_stride", &mut self.stem_stride)?;
        kv.update("scale", &mut self.scale)?;
        kv.update("reduction", &mut self.reduction)?;
        kv.update("se", &mut self.se)?;
        kv.update("se_reduction", &mut self.se_reduction)?;
        kv.update("norm_act", &mut self.norm_act)?;
        kv.update("classes", &mut self.classes)?;
        let lists = ["stage_blocks", "stage_widths", "stage_strides"];
        if lists.iter().any(|k| kv.get(k).is_some()) {
            let cur = [
                self.stages.iter().map(|s| s.blocks).collect::<Vec<_>>(),
                self.stages.iter().map(|s| s.width).collect(),
                self.stages.iter().map(|s| s.stride).collect(),
            ];
            let mut cols = Vec::new();
            for (key, current) in lists.iter().zip(cur) {
                cols.push(match kv.get_list(key)? {
                    Some(v) => v,
                    None => current,
                });
            }
            if cols[0].len() != cols[1].len() || cols[1].len() != cols[2].len() {
                return Err(Error::Config("stage_blocks, stage_widths and stage_strides differ in length".into()));
            }
            self.stages = (0..cols[0].len())
                .map(|i| StageConfig { blocks: cols[0][i], width: cols[1][i], stride: cols[2][i] })
                .collect();
        }
        Ok(self)
    }
}

/// Stem convolution, stages of (gated) Res2Net blocks, global average
/// pooling, and a dense classifier producing `classes` logits.
#[derive(Clone, Debug)]
pub struct Model<T> {
    pub cfg: BackboneConfig,
    pub stem: ConvLayer<T>,
    pub blocks: Vec<Res2NetBlock<T>>,
    pub classifier: Dense<T>,
}

/// Logit index of the bonafide class.
pub const BONAFIDE: usize = 0;
/// Logit index of the spoof class.
pub const SPOOF: usize = 1;

impl<T: Real> Model<T> {
    pub fn new(cfg: BackboneConfig, rng: &mut impl Rng) -> Result<Self> {
        cfg.validate()?;
        let stem = ConvLayer::new(
            "stem",
            1,
            cfg.stem_channels,
            3,
            cfg.stem_stride,
            ConvOptions { bias: !cfg.norm_act, batch_norm: cfg.norm_act, relu: true },
            rng,
        );
        let mut blocks = Vec::new();
        let mut idx = 0;
        let configs = cfg.block_configs();
        for (si, stage) in cfg.stages.iter().enumerate() {
            for bi in 0..stage.blocks {
                blocks.push(Res2NetBlock::new(&format!("stage{}.block{}", si + 1, bi + 1), configs[idx].clone(), rng)?);
                idx += 1;
            }
        }
        let last = cfg.stages.last().unwrap().width;
        let classifier = Dense::new("classifier", last, cfg.classes, true, rng);
        Ok(Self { cfg, stem, blocks, classifier })
    }

    /// `[N, 1, D, T]` (or `[N, D, T]`) features to `[N, classes]` logits.
    pub fn forward<'t>(&self, s: &mut Session<'t, T>, x: Var<'t, T>) -> Result<Var<'t, T>> {
        let shape = x.shape();
        let x = match shape.len() {
            3 => x.reshape(&[shape[0], 1, shape[1], shape[2]])?,
            4 if shape[1] == 1 => x,
            _ => {
                return Err(Error::Dimension(format!("model expects [N, 1, D, T] features, got {shape:?}")));
            }
        };
        let mut h = self.stem.forward(s, x)?;
        for b in &self.blocks {
            h = b.forward(s, h)?;
        }
        let pooled = h.mean_over(&[2, 3])?;
        self.classifier.forward(s, pooled)
    }

    /// Eval-mode logits for a batch of features.
    pub fn logits(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let tape = Tape::new();
        let mut s = Session::new(&tape, Mode::Eval).with_grads(false);
        Ok(self.forward(&mut s, tape.constant(x.clone()))?.value())
    }

    /// Gate values realized on `x`, grouped by block name in network order.
    /// The forward result is unaffected.
    pub fn gate_inspection(&self, x: &Tensor<T>) -> Result<Vec<(String, Vec<GateRecord<T>>)>> {
        let tape = Tape::new();
        let mut s = Session::new(&tape, Mode::Eval).with_grads(false).with_gate_trace();
        self.forward(&mut s, tape.constant(x.clone()))?;
        let mut by_block: BTreeMap<String, Vec<GateRecord<T>>> = BTreeMap::new();
        for rec in s.take_gate_trace() {
            by_block.entry(rec.block.clone()).or_default().push(rec);
        }
        Ok(self.blocks.iter().map(|b| (b.name.clone(), by_block.remove(&b.name).unwrap_or_default())).collect())
    }

    /// Learnable scalars per top-level component (stem, each block, classifier).
    pub fn param_breakdown(&self) -> Vec<(String, usize)> {
        let mut out = vec![("stem".to_string(), self.stem.param_count())];
        out.extend(self.blocks.iter().map(|b| (b.name.clone(), b.param_count())));
        out.push(("classifier".to_string(), self.classifier.param_count()));
        out
    }
}

impl<T: Real> Module<T> for Model<T> {
    fn visit(&self, f: &mut dyn FnMut(&Param<T>)) {
        self.stem.visit(f);
        self.blocks.iter().for_each(|b| b.visit(f));
        self.classifier.visit(f);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param<T>)) {
        self.stem.visit_mut(f);
        self.blocks.iter_mut().for_each(|b| b.visit_mut(f));
        self.classifier.visit_mut(f);
    }
}

/// Learnable scalars in `model`.
pub fn model_param_count<T: Real>(model: &Model<T>) -> usize {
    model.param_count()
}

/// Parameters a gate kind adds on top of plain Res2Net for `cfg`:
/// `sum over blocks of (s - 2) * gate_param_count(kind, C_block, r)`.
pub fn gate_param_delta(cfg: &BackboneConfig, kind: GateKind) -> usize {
    cfg.block_configs().iter().map(|b| (b.scale - 2) * gate_param_count(kind, b.group_channels(), b.reduction)).sum()
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::diagnostics::BLOCK_FD;
    use crate::layers::module_grad_check_floor;

    fn randn(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
        Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0))
    }

    fn bare(gate: Option<GateKind>) -> BlockConfig {
        BlockConfig {
            in_channels: 8,
            width: 8,
            scale: 4,
            gate,
            reduction: 2,
            se: false,
            se_reduction: 2,
            stride: 1,
            norm_act: false,
        }
    }

    fn identity_kernels(block: &mut Res2NetBlock<f64>) {
        for conv in &mut block.convs {
            let (o, i) = (conv.outputs(), conv.inputs());
            conv.weight.value = Tensor::from_fn(&[o, i, 3, 3], |idx| {
                let (oc, rest) = (idx / (i * 9), idx % (i * 9));
                let (ic, k) = (rest / 9, rest % 9);
                if oc == ic && k == 4 {
                    1.0
                } else {
                    0.0
                }
            });
        }
    }

    #[test]
    fn identity_kernels_unroll_the_recursion() {
        let mut r = ChaCha8Rng::seed_from_u64(1);
        let mut block = Res2NetBlock::<f64>::new("b", bare(None), &mut r).unwrap();
        identity_kernels(&mut block);
        let tape = Tape::new();
        let mut s = Session::new(&tape, Mode::Eval);
        let g: Vec<Tensor<f64>> = (0..4).map(|_| randn(&[1, 2, 3, 3], &mut r)).collect();
        let vars: Vec<_> = g.iter().map(|t| tape.constant(t.clone())).collect();
        let ys = block.multiscale(&mut s, &vars).unwrap();
        let add = |a: &Tensor<f64>, b: &Tensor<f64>| {
            Tensor::new(a.shape(), a.data().iter().zip(b.data()).map(|(x, y)| x + y).collect()).unwrap()
        };
        let g32 = add(&g[2], &g[1]);
        let want = [g[0].clone(), g[1].clone(), g32.clone(), add(&g[3], &g32)];
        for (y, w) in ys.iter().zip(&want) {
            assert!(y.value().max_abs_diff(w) < 1e-15);
        }
    }

    #[test]
    fn zero_input_gives_zero_output() {
        let mut r = ChaCha8Rng::seed_from_u64(2);
        for arch in Arch::ALL {
            let cfg = BlockConfig { se: true, ..bare(arch.gate()) };
            let block = Res2NetBlock::<f64>::new("b", cfg, &mut r).unwrap();
            let y = block.apply(&Tensor::zeros(&[2, 8, 3, 3]), None).unwrap();
            assert!(y.data().iter().all(|&v| v == 0.0), "{arch}");
        }
    }

    #[test]
    fn ones_override_reduces_to_res2net() {
        let mut r = ChaCha8Rng::seed_from_u64(3);
        for kind in GateKind::ALL {
            let cfg = BlockConfig { se: true, norm_act: true, ..bare(Some(kind)) };
            let block = Res2NetBlock::<f64>::new("b", cfg, &mut r).unwrap();
            let x = randn(&[2, 8, 4, 3], &mut r);
            let gated = block.apply(&x, Some(1.0)).unwrap();
            let plain = block.without_gates().apply(&x, None).unwrap();
            assert!(gated.max_abs_diff(&plain) <= 1e-12, "{kind}");
            let free = block.apply(&x, None).unwrap();
            assert!(free.max_abs_diff(&plain) > 1e-6, "{kind}: gates should matter");
        }
    }

    #[test]
    fn zeros_override_cuts_the_carry() {
        let mut r = ChaCha8Rng::seed_from_u64(4);
        let block = Res2NetBlock::<f64>::new("b", bare(Some(GateKind::Mcg)), &mut r).unwrap();
        let tape = Tape::new();
        let mut s = Session::new(&tape, Mode::Eval).with_gate_override(Some(0.0));
        let groups: Vec<_> = (0..4).map(|_| tape.constant(randn(&[1, 2, 3, 3], &mut r))).collect();
        let ys = block.multiscale(&mut s, &groups).unwrap();
        let mut plain = Session::new(&tape, Mode::Eval);
        for i in 1..4 {
            let alone = block.convs[i - 1].forward(&mut plain, groups[i]).unwrap();
            assert_eq!(ys[i].value(), alone.value());
        }
    }

    #[test]
    fn groups_are_causal() {
        let mut r = ChaCha8Rng::seed_from_u64(5);
        for arch in Arch::ALL {
            let block = Res2NetBlock::<f64>::new("b", bare(arch.gate()), &mut r).unwrap();
            let base: Vec<Tensor<f64>> = (0..4).map(|_| randn(&[1, 2, 3, 3], &mut r)).collect();
            let run = |gs: &[Tensor<f64>]| {
                let tape = Tape::new();
                let mut s = Session::new(&tape, Mode::Eval);
                let vars: Vec<_> = gs.iter().map(|t| tape.constant(t.clone())).collect();
                block.multiscale(&mut s, &vars).unwrap().iter().map(|v| v.value()).collect::<Vec<_>>()
            };
            let y0 = run(&base);
            for j in 0..4 {
                let mut pert = base.clone();
                pert[j] = randn(&[1, 2, 3, 3], &mut r);
                let y1 = run(&pert);
                for i in 0..j {
                    assert_eq!(y0[i], y1[i], "{arch}: y{} moved when x{} changed", i + 1, j + 1);
                }
                assert_ne!(y0[j], y1[j]);
            }
        }
    }

    #[test]
    fn gate_count_is_scale_minus_two() {
        let mut r = ChaCha8Rng::seed_from_u64(6);
        for scale in 2..=6 {
            let cfg = BlockConfig { width: scale * 4, in_channels: scale * 4, scale, ..bare(Some(GateKind::Scg)) };
            let b = Res2NetBlock::<f32>::new("b", cfg, &mut r).unwrap();
            assert_eq!(b.gates.len(), scale - 2);
            assert_eq!(b.convs.len(), scale - 1);
        }
        let bad = BlockConfig { scale: 1, ..bare(None) };
        assert!(Res2NetBlock::<f32>::new("b", bad, &mut r).is_err());
        let bad = BlockConfig { width: 10, ..bare(None) };
        assert!(Res2NetBlock::<f32>::new("b", bad, &mut r).is_err());
    }

    fn tiny(arch: Arch) -> BackboneConfig {
        BackboneConfig {
            input_bins: 6,
            input_frames: 5,
            stem_channels: 4,
            stem_stride: 1,
            stages: vec![StageConfig { blocks: 1, width: 8, stride: 2 }],
            scale: 4,
            arch,
            reduction: 2,
            se: true,
            se_reduction: 2,
            norm_act: true,
            classes: 2,
        }
    }

    #[test]
    fn tiny_model_counts_match_enumeration() {
        let mut r = ChaCha8Rng::seed_from_u64(7);
        let m = Model::<f32>::new(tiny(Arch::Res2Net), &mut r).unwrap();
        let conv = |i: usize, o: usize, k: usize| i * o * k * k + 2 * o;
        let stem = conv(1, 4, 3);
        let block = conv(4, 8, 1) + 3 * conv(2, 2, 3) + conv(8, 8, 1) + (8 * 4 + 4 + 4 * 8 + 8) + conv(4, 8, 1);
        let classifier = 8 * 2 + 2;
        assert_eq!(model_param_count(&m), stem + block + classifier);
        for arch in [Arch::Scg, Arch::Mcg, Arch::Mlcg] {
            let g = Model::<f32>::new(tiny(arch), &mut r).unwrap();
            let delta = model_param_count(&g) - model_param_count(&m);
            assert_eq!(delta, gate_param_delta(&tiny(arch), arch.gate().unwrap()), "{arch}");
        }
        assert_eq!(gate_param_delta(&tiny(Arch::Scg), GateKind::Scg), 2 * 2 * 2);
    }

    #[test]
    fn se_adds_expected_parameters() {
        let mut r = ChaCha8Rng::seed_from_u64(8);
        let with = Res2NetBlock::<f32>::new("b", BlockConfig { se: true, ..bare(None) }, &mut r).unwrap();
        let without = Res2NetBlock::<f32>::new("b", bare(None), &mut r).unwrap();
        let (c, rse) = (8, 2);
        assert_eq!(with.param_count() - without.param_count(), 2 * c * c / rse + c / rse + c);
    }

    #[test]
    fn gate_inspection_does_not_change_logits() {
        let mut r = ChaCha8Rng::seed_from_u64(9);
        let m = Model::<f64>::new(tiny(Arch::Mlcg), &mut r).unwrap();
        let x = randn(&[2, 1, 6, 5], &mut r);
        let gates = m.gate_inspection(&x).unwrap();
        assert_eq!(gates.len(), 1);
        assert_eq!(gates[0].1.len(), 2);
        assert_eq!(gates[0].1[0].values.shape(), &[2, 2]);
        assert!(gates[0].1.iter().all(|g| g.values.data().iter().all(|&a| a > 0.0 && a < 1.0)));
        assert_eq!(m.logits(&x).unwrap().shape(), &[2, 2]);
    }

    #[test]
    fn tiny_model_passes_grad_check() {
        for arch in Arch::ALL {
            let mut r = ChaCha8Rng::seed_from_u64(10);
            let m = Model::<f64>::new(tiny(arch), &mut r).unwrap();
            let x = randn(&[2, 1, 6, 5], &mut r);
            let err =
                module_grad_check_floor(&m, &x, BLOCK_FD, 1e-5, |m, s, x| m.forward(s, x)?.log_softmax().nll(&[0, 1]))
                    .unwrap();
            assert!(err <= 1e-5, "{arch}: {err}");
        }
    }

    #[test]
    fn kv_round_trip() {
        let cfg = BackboneConfig::default().with_arch(Arch::Mlcg);
        let back = BackboneConfig::default().merge_kv(&cfg.to_kv()).unwrap();
        assert_eq!(back, cfg);
        assert_eq!("MCG".parse::<Arch>().unwrap(), Arch::Mcg);
        assert!("foo".parse::<Arch>().is_err());
    }
}
