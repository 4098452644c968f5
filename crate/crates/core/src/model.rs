//! The five compared networks: a shared encoder, one decoder per task and,
//! depending on the architecture, exchange blocks between the decoders.
//!
//! Decoder scale `s` holds features at `1 / 2^s` of the input resolution.
//! Scale `n` (the encoder depth) is the decoder entry; scale 0 feeds the
//! heads. Exchange blocks and intermediate supervision taps sit at the
//! configured `scales`; taps read the features before the block.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use safetensors::tensor::{Dtype, SafeTensors, TensorView};
use serde::{Deserialize, Serialize};

use crate::attention::{FusionKind, Mteb, PadNetBlock, XtamConfig};
use crate::autograd::{Graph, Var};
use crate::error::{Error, Result};
use crate::nn::{Conv2d, ConvBnRelu};
use crate::params::{ParamGroup, ParamId, ParamKind, ParamStore};
use crate::task::Task;
use crate::tensor::{ConvGeom, Tensor};

/// Added to the softplus depth head so that predictions stay positive.
pub const DEPTH_FLOOR: f64 = 1e-3;

const CHECKPOINT_FORMAT: &str = "densemtl-checkpoint-v1";

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Architecture {
    /// One network per task.
    Stl,
    /// Shared encoder, independent decoders.
    Mtl,
    /// Self-attention distillation between plain decoders.
    Padnet,
    /// Self-attention distillation between ASPP + skip decoders.
    ThreewaysPadnet,
    /// Cross-task attention exchange between ASPP + skip decoders.
    #[default]
    Ours,
}

impl Architecture {
    pub const ALL: [Architecture; 5] =
        [Architecture::Stl, Architecture::Mtl, Architecture::Padnet, Architecture::ThreewaysPadnet, Architecture::Ours];

    pub fn name(self) -> &'static str {
        match self {
            Architecture::Stl => "stl",
            Architecture::Mtl => "mtl",
            Architecture::Padnet => "padnet",
            Architecture::ThreewaysPadnet => "threeways_padnet",
            Architecture::Ours => "ours",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EncoderSpec {
    /// Output channels per stage; every stage halves the resolution.
    pub widths: Vec<usize>,
    /// Convolutions per stage, the first one strided.
    pub blocks_per_stage: usize,
}

impl Default for EncoderSpec {
    fn default() -> Self {
        Self { widths: vec![32, 64, 128, 256], blocks_per_stage: 2 }
    }
}

impl EncoderSpec {
    pub fn stages(&self) -> usize {
        self.widths.len()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DecoderSpec {
    pub use_aspp: bool,
    /// Dilations of the 3x3 ASPP branches; a 1x1 branch is always present.
    pub aspp_rates: Vec<usize>,
    /// Concatenate the encoder output of the same scale before each
    /// upsampling block.
    pub skips: bool,
    /// Feature width at scales `0..=n`.
    pub widths: Vec<usize>,
}

impl DecoderSpec {
    /// Default decoder of `arch` on top of `encoder`.
    pub fn for_architecture(arch: Architecture, encoder: &EncoderSpec) -> Self {
        let rich = matches!(arch, Architecture::ThreewaysPadnet | Architecture::Ours);
        let w = &encoder.widths;
        let mut widths = vec![(w.first().copied().unwrap_or(16) / 2).max(8)];
        widths.extend(w.iter().copied());
        Self { use_aspp: rich, aspp_rates: vec![2, 3], skips: rich, widths }
    }
}

fn default_scales() -> BTreeSet<usize> {
    [1].into()
}

fn default_d_far() -> f64 {
    20.0
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub architecture: Architecture,
    pub tasks: Vec<Task>,
    /// Segmentation classes.
    pub num_classes: usize,
    #[serde(default)]
    pub encoder: EncoderSpec,
    /// `None` picks [`DecoderSpec::for_architecture`].
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub decoder: Option<DecoderSpec>,
    /// Exchange block positions, which are also the intermediate
    /// supervision scales.
    #[serde(default = "default_scales")]
    pub scales: BTreeSet<usize>,
    #[serde(default)]
    pub xtam: XtamConfig,
    #[serde(default)]
    pub fusion: FusionKind,
    /// Depth range used to initialise the depth head.
    #[serde(default = "default_d_far")]
    pub d_far: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            architecture: Architecture::Ours,
            tasks: vec![Task::Seg, Task::Depth, Task::Normals],
            num_classes: 8,
            encoder: EncoderSpec::default(),
            decoder: None,
            scales: default_scales(),
            xtam: XtamConfig::default(),
            fusion: FusionKind::Add,
            d_far: default_d_far(),
        }
    }
}

impl ModelConfig {
    pub fn decoder_spec(&self) -> DecoderSpec {
        self.decoder.clone().unwrap_or_else(|| DecoderSpec::for_architecture(self.architecture, &self.encoder))
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        let n = self.encoder.stages();
        if self.architecture == Architecture::Stl && self.tasks.len() != 1 {
            return bad(format!("stl takes exactly one task, got {}", self.tasks.len()));
        }
        if self.tasks.is_empty() && self.architecture != Architecture::Mtl {
            return bad(format!("{} needs at least one task", self.architecture.name()));
        }
        let unique: BTreeSet<_> = self.tasks.iter().collect();
        if unique.len() != self.tasks.len() {
            return bad("duplicate task".into());
        }
        if self.tasks.contains(&Task::Seg) && self.num_classes < 2 {
            return bad(format!("segmentation needs at least 2 classes, got {}", self.num_classes));
        }
        if n == 0 || self.encoder.widths.contains(&0) || self.encoder.blocks_per_stage == 0 {
            return bad(format!("invalid encoder {:?}", self.encoder));
        }
        let dec = self.decoder_spec();
        if dec.widths.len() != n + 1 || dec.widths.contains(&0) {
            return bad(format!("decoder needs {} positive widths, got {:?}", n + 1, dec.widths));
        }
        if dec.aspp_rates.contains(&0) {
            return bad("ASPP rates must be positive".into());
        }
        if let Some(s) = self.scales.iter().find(|&&s| s == 0 || s > n) {
            return bad(format!("scale {s} outside the decoder range 1..={n}"));
        }
        if !(self.d_far > 0.0) {
            return bad(format!("d_far = {}", self.d_far));
        }
        Ok(())
    }
}

/// Predictions at the supervision scales and at full resolution. Every map
/// is upsampled to the input size and activated.
#[derive(Clone, Debug)]
pub struct MtlOutput<T = Var> {
    /// scale -> task -> prediction, read before the exchange block.
    pub intermediate: BTreeMap<usize, BTreeMap<Task, T>>,
    pub finals: BTreeMap<Task, T>,
}

#[derive(Clone, Debug)]
struct Aspp {
    branches: Vec<ConvBnRelu>,
    project: ConvBnRelu,
}

#[derive(Clone, Debug)]
enum Entry {
    Aspp(Aspp),
    Plain(ConvBnRelu),
}

#[derive(Clone, Debug)]
struct Decoder {
    entry: Entry,
    /// `ups[s]` produces scale `s` from scale `s + 1`.
    ups: Vec<ConvBnRelu>,
}

#[derive(Clone, Debug)]
pub enum Exchange {
    Mteb(Mteb),
    PadNet(PadNetBlock),
}

impl Exchange {
    fn forward(&self, g: &mut Graph, store: &ParamStore, f: &[Var]) -> Result<Vec<Var>> {
        match self {
            Exchange::Mteb(m) => m.forward(g, store, f),
            Exchange::PadNet(p) => p.forward(g, store, f),
        }
    }
}

#[derive(Clone, Debug)]
pub struct Model {
    config: ModelConfig,
    decoder_spec: DecoderSpec,
    store: ParamStore,
    encoder: Vec<Vec<ConvBnRelu>>,
    decoders: Vec<Decoder>,
    taps: BTreeMap<usize, Vec<Conv2d>>,
    heads: Vec<Conv2d>,
    exchanges: BTreeMap<usize, Exchange>,
}

fn inverse_softplus(y: f64) -> f64 {
    // ln(e^y - 1), stable for large y
    y + (-(-y).exp()).ln_1p()
}

/// Builds `cfg` with weights drawn from `seed`. Shared parts are created
/// first and in a fixed order, so two architectures built from the same
/// seed hold identical encoder, decoder and head weights.
pub fn build_model(cfg: &ModelConfig, seed: u64) -> Result<Model> {
    Model::new(cfg.clone(), seed)
}

impl Model {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let spec = config.decoder_spec();
        let n = config.encoder.stages();
        let names: Vec<&str> = config.tasks.iter().map(|t| t.name()).collect();

        let mut encoder = Vec::with_capacity(n);
        let mut cin = 3;
        for (k, &w) in config.encoder.widths.iter().enumerate() {
            let mut stage = Vec::new();
            for b in 0..config.encoder.blocks_per_stage {
                let geom = if b == 0 { ConvGeom::new(3, 2, 1, 1) } else { ConvGeom::same(3, 1) };
                let name = format!("encoder.stage{}.block{b}", k + 1);
                stage.push(ConvBnRelu::new(&mut store, &name, cin, w, geom, ParamGroup::Encoder, &mut rng)?);
                cin = w;
            }
            encoder.push(stage);
        }

        let dg = ParamGroup::Decoder;
        let mut decoders = Vec::with_capacity(names.len());
        for t in &names {
            let top = config.encoder.widths[n - 1];
            let wn = spec.widths[n];
            let entry = if spec.use_aspp {
                let mut branches =
                    vec![ConvBnRelu::new(&mut store, &format!("decoder.{t}.aspp.b1"), top, wn, ConvGeom::same(1, 1), dg, &mut rng)?];
                for &r in &spec.aspp_rates {
                    let name = format!("decoder.{t}.aspp.d{r}");
                    branches.push(ConvBnRelu::new(&mut store, &name, top, wn, ConvGeom::same(3, r), dg, &mut rng)?);
                }
                let cat = wn * branches.len();
                let project =
                    ConvBnRelu::new(&mut store, &format!("decoder.{t}.aspp.project"), cat, wn, ConvGeom::same(1, 1), dg, &mut rng)?;
                Entry::Aspp(Aspp { branches, project })
            } else {
                Entry::Plain(ConvBnRelu::new(&mut store, &format!("decoder.{t}.entry"), top, wn, ConvGeom::same(3, 1), dg, &mut rng)?)
            };
            let mut ups = Vec::with_capacity(n);
            for s in 0..n {
                let skip = if spec.skips && s >= 1 { config.encoder.widths[s - 1] } else { 0 };
                let name = format!("decoder.{t}.up{s}");
                ups.push(ConvBnRelu::new(&mut store, &name, spec.widths[s + 1] + skip, spec.widths[s], ConvGeom::same(3, 1), dg, &mut rng)?);
            }
            decoders.push(Decoder { entry, ups });
        }

        let depth_bias = inverse_softplus(config.d_far / 2.0 - DEPTH_FLOOR);
        let mut head = |store: &mut ParamStore, name: String, task: Task, cin: usize| -> Result<Conv2d> {
            let conv = Conv2d::pointwise(store, &name, cin, task.channels(config.num_classes), dg, &mut rng)?;
            let bias = store.get_mut(conv.bias.expect("pointwise convs have a bias")).data_mut();
            match task {
                Task::Depth => bias.fill(depth_bias),
                // a pixel with all-zero features still gets a unit normal
                Task::Normals => bias.copy_from_slice(&[0.0, 0.0, -1.0]),
                Task::Seg | Task::Edges => {}
            }
            Ok(conv)
        };
        let mut taps = BTreeMap::new();
        for &s in &config.scales {
            let mut row = Vec::with_capacity(names.len());
            for &t in &config.tasks {
                row.push(head(&mut store, format!("tap.s{s}.{t}"), t, spec.widths[s])?);
            }
            taps.insert(s, row);
        }
        let mut heads = Vec::with_capacity(names.len());
        for &t in &config.tasks {
            heads.push(head(&mut store, format!("head.{t}"), t, spec.widths[0])?);
        }

        let mut exchanges = BTreeMap::new();
        for &s in &config.scales {
            let c = spec.widths[s];
            let block = match config.architecture {
                Architecture::Stl | Architecture::Mtl => None,
                Architecture::Padnet | Architecture::ThreewaysPadnet => {
                    Some(Exchange::PadNet(PadNetBlock::new(&mut store, &format!("padnet.s{s}"), &names, c, &mut rng)?))
                }
                Architecture::Ours => Some(Exchange::Mteb(Mteb::new(
                    &mut store,
                    &format!("mteb.s{s}"),
                    &names,
                    c,
                    &config.xtam,
                    config.fusion,
                    &mut rng,
                )?)),
            };
            if let Some(b) = block {
                exchanges.insert(s, b);
            }
        }

        Ok(Self { config, decoder_spec: spec, store, encoder, decoders, taps, heads, exchanges })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn decoder_spec(&self) -> &DecoderSpec {
        &self.decoder_spec
    }

    pub fn tasks(&self) -> &[Task] {
        &self.config.tasks
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    pub fn store_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    /// Exchange blocks by scale.
    pub fn exchanges(&self) -> &BTreeMap<usize, Exchange> {
        &self.exchanges
    }

    pub fn mtebs(&self) -> impl Iterator<Item = (usize, &Mteb)> {
        self.exchanges.iter().filter_map(|(&s, e)| match e {
            Exchange::Mteb(m) => Some((s, m)),
            Exchange::PadNet(_) => None,
        })
    }

    /// Number of trainable scalars.
    pub fn parameter_count(&self) -> usize {
        self.store.trainable_count()
    }

    pub fn encoder_parameter_count(&self) -> usize {
        self.store.trainable_count_with_prefix("encoder.")
    }

    /// Trainable scalars inside the exchange blocks.
    pub fn exchange_parameter_count(&self) -> usize {
        self.store.trainable_count_with_prefix("mteb.") + self.store.trainable_count_with_prefix("padnet.")
    }

    /// Zeroes every mTEB combiner and every PAD-Net message, turning the
    /// exchange blocks into identities under additive fusion.
    pub fn zero_exchanges(&mut self) {
        for e in self.exchanges.values() {
            match e {
                Exchange::Mteb(m) => m.zero_combiners(&mut self.store),
                Exchange::PadNet(p) => p.zero_messages(&mut self.store),
            }
        }
    }

    /// Query, key and value projection parameters of every xTAM.
    pub fn projection_ids(&self) -> Vec<ParamId> {
        self.mtebs().flat_map(|(_, m)| m.projection_ids()).collect()
    }

    pub fn gate_ids(&self) -> Vec<ParamId> {
        self.mtebs().flat_map(|(_, m)| m.gate_ids()).collect()
    }

    /// Checks that `h x w` images fit the encoder.
    pub fn check_input(&self, h: usize, w: usize) -> Result<()> {
        let factor = 1usize << self.config.encoder.stages();
        if h == 0 || w == 0 || h % factor != 0 || w % factor != 0 {
            return Err(Error::Indivisible { op: "model input", height: h, width: w, factor });
        }
        Ok(())
    }

    fn activate(&self, g: &mut Graph, task: Task, x: Var) -> Result<Var> {
        Ok(match task {
            Task::Seg => x,
            Task::Depth => {
                let y = g.softplus(x);
                g.add_scalar(y, DEPTH_FLOOR)
            }
            Task::Normals => g.l2_normalize_channels(x)?,
            Task::Edges => g.sigmoid(x),
        })
    }

    fn read_taps(&self, g: &mut Graph, s: usize, feats: &[Var], out: &mut MtlOutput) -> Result<()> {
        let Some(taps) = self.taps.get(&s) else { return Ok(()) };
        let mut row = BTreeMap::new();
        for ((conv, &f), &t) in taps.iter().zip(feats).zip(&self.config.tasks) {
            let y = conv.forward(g, &self.store, f)?;
            let y = g.upsample(y, 1 << s)?;
            row.insert(t, self.activate(g, t, y)?);
        }
        out.intermediate.insert(s, row);
        Ok(())
    }

    fn at_scale(&self, g: &mut Graph, s: usize, feats: Vec<Var>, out: &mut MtlOutput) -> Result<Vec<Var>> {
        self.read_taps(g, s, &feats, out)?;
        match self.exchanges.get(&s) {
            Some(e) => e.forward(g, &self.store, &feats),
            None => Ok(feats),
        }
    }

    /// Runs `images` (`[B, 3, H, W]`) through the network. Batch
    /// normalisation uses batch statistics when `g` is in training mode.
    pub fn forward(&self, g: &mut Graph, images: Var) -> Result<MtlOutput> {
        let shape = g.shape(images).to_vec();
        if shape.len() != 4 || shape[1] != 3 {
            return Err(Error::shape("model input", format!("{shape:?}, expected [B, 3, H, W]")));
        }
        self.check_input(shape[2], shape[3])?;
        let store = &self.store;
        let mut skips = Vec::with_capacity(self.encoder.len());
        let mut x = images;
        for stage in &self.encoder {
            for block in stage {
                x = block.forward(g, store, x)?;
            }
            skips.push(x);
        }
        let n = self.encoder.len();
        let mut out = MtlOutput { intermediate: BTreeMap::new(), finals: BTreeMap::new() };

        let mut feats = Vec::with_capacity(self.decoders.len());
        for d in &self.decoders {
            feats.push(match &d.entry {
                Entry::Plain(c) => c.forward(g, store, x)?,
                Entry::Aspp(a) => {
                    let mut parts = Vec::with_capacity(a.branches.len());
                    for b in &a.branches {
                        parts.push(b.forward(g, store, x)?);
                    }
                    let cat = g.concat(&parts, 1)?;
                    a.project.forward(g, store, cat)?
                }
            });
        }
        feats = self.at_scale(g, n, feats, &mut out)?;
        for s in (0..n).rev() {
            let mut next = Vec::with_capacity(feats.len());
            for (d, &f) in self.decoders.iter().zip(&feats) {
                let mut y = g.upsample(f, 2)?;
                if self.decoder_spec.skips && s >= 1 {
                    y = g.concat(&[y, skips[s - 1]], 1)?;
                }
                next.push(d.ups[s].forward(g, store, y)?);
            }
            feats = if s >= 1 { self.at_scale(g, s, next, &mut out)? } else { next };
        }
        for ((head, &f), &t) in self.heads.iter().zip(&feats).zip(&self.config.tasks) {
            let y = head.forward(g, store, f)?;
            out.finals.insert(t, self.activate(g, t, y)?);
        }
        Ok(out)
    }

    /// Inference with running batch-norm statistics.
    pub fn predict(&self, images: &Tensor) -> Result<MtlOutput<Tensor>> {
        let mut g = Graph::new(false);
        let x = g.constant(images.clone());
        let out = self.forward(&mut g, x)?;
        let take = |m: &BTreeMap<Task, Var>| m.iter().map(|(&t, &v)| (t, g.value(v).clone())).collect::<BTreeMap<_, _>>();
        Ok(MtlOutput {
            intermediate: out.intermediate.iter().map(|(&s, m)| (s, take(m))).collect(),
            finals: take(&out.finals),
        })
    }

    /// Writes every parameter and buffer as little-endian f64 arrays, with
    /// the model config as JSON in the header metadata.
    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes: Vec<(String, Vec<usize>, Vec<u8>)> = self
            .store
            .iter()
            .map(|(_, e)| (e.name.clone(), e.value.shape().to_vec(), e.value.data().iter().flat_map(|v| v.to_le_bytes()).collect()))
            .collect();
        let views = bytes
            .iter()
            .map(|(name, shape, data)| Ok((name.as_str(), TensorView::new(Dtype::F64, shape.clone(), data)?)))
            .collect::<Result<Vec<_>>>()?;
        let meta: HashMap<String, String> =
            [("format".to_string(), CHECKPOINT_FORMAT.to_string()), ("config".to_string(), serde_json::to_string(&self.config)?)].into();
        safetensors::serialize_to_file(views, Some(meta), path)?;
        Ok(())
    }

    /// Rebuilds the model stored by [`Model::save`].
    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path)?;
        let fmt = |detail: String| Error::Format { path: path.to_path_buf(), detail };
        let (_, header) = SafeTensors::read_metadata(&bytes)?;
        let meta = header.metadata().as_ref().ok_or_else(|| fmt("no metadata".into()))?;
        if meta.get("format").map(String::as_str) != Some(CHECKPOINT_FORMAT) {
            return Err(fmt(format!("format tag {:?}", meta.get("format"))));
        }
        let config: ModelConfig = serde_json::from_str(meta.get("config").ok_or_else(|| fmt("no config".into()))?)?;
        let mut model = Model::new(config, 0)?;
        let st = SafeTensors::deserialize(&bytes)?;
        if st.len() != model.store.len() {
            return Err(fmt(format!("{} tensors for {} parameters", st.len(), model.store.len())));
        }
        for (name, view) in st.tensors() {
            if view.dtype() != Dtype::F64 {
                return Err(fmt(format!("`{name}` is {:?}", view.dtype())));
            }
            let data = view.data().chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect();
            model.store.set(&name, Tensor::new(view.shape().to_vec(), data)?)?;
        }
        Ok(model)
    }

    /// Names of the trainable parameters.
    pub fn trainable_names(&self) -> Vec<&str> {
        self.store.iter().filter(|(_, e)| e.kind == ParamKind::Trainable).map(|(_, e)| e.name.as_str()).collect()
    }
}
