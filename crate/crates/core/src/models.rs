//! Assembly of the five architectures and the multi-task loss.
//!
//! All variants share the same trunk idiom: learned embeddings feed a
//! stack of BiGRU layers; attention taps read a trunk layer, pool over the
//! unmasked span, and classify through a task head. In the hierarchical
//! variant the three tasks tap different depths.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;
use thiserror::Error;

use crate::autograd::{apply_dropout, Parameter, Tape, Tensor};
use crate::layers::{
    attention_pool, bigru_forward, classify_head, embed_lookup, gru_cell_step, BiGruParams,
    DenseParams, EmbeddingTable, GruCellParams, LayerError, MultiHeadAttentionParams,
};

#[derive(Debug, Error)]
pub enum ModelError {
    #[error(transparent)]
    Layer(#[from] LayerError),
    #[error(transparent)]
    Autograd(#[from] crate::autograd::AutogradError),
    #[error("invalid spec: {0}")]
    InvalidSpec(String),
    #[error("token id {0} exceeds model vocabulary {1}")]
    VocabMismatch(usize, usize),
    #[error("missing loss for task {0:?}")]
    MissingTaskLoss(Task),
    #[error("checkpoint io: {0}")]
    Io(#[from] std::io::Error),
    #[error("checkpoint corrupt: {0}")]
    Corrupt(String),
}

type Result<T> = std::result::Result<T, ModelError>;

/// The three prediction tasks, ordered coarse to fine for stable map keys.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Task {
    City,
    State,
    Country,
}

impl Task {
    pub const ALL: [Task; 3] = [Task::City, Task::State, Task::Country];

    pub fn name(&self) -> &'static str {
        match self {
            Task::City => "city",
            Task::State => "state",
            Task::Country => "country",
        }
    }
}

impl std::str::FromStr for Task {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "city" => Ok(Task::City),
            "state" => Ok(Task::State),
            "country" => Ok(Task::Country),
            other => Err(format!("unknown task {other:?}")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HamtlOrder {
    CityFirst,
    CountryFirst,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    /// Embedding, 3 BiGRU layers, attention on layer 3 only, pool, head.
    SingleTask(Task),
    /// Unidirectional 1-layer GRU; last state feeds the head.
    GruBaseline(Task),
    /// 3 shared BiGRU layers, shared attention on layer 3, one pooled
    /// vector, three heads.
    MtlCommonAttn,
    /// 2 shared BiGRU layers, then a task-specific attention + pool + head
    /// per task.
    MtlSpecAttn,
    /// 4 BiGRU layers; layers 2-4 each carry a task-specific attention tap
    /// and head. `CityFirst` supervises city at layer 2 and country at
    /// layer 4; `CountryFirst` swaps them. State stays at layer 3.
    Hamtl(HamtlOrder),
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ModelSpec {
    pub variant: Variant,
    pub vocab_size: usize,
    #[serde(default = "default_embed_dim")]
    pub embed_dim: usize,
    #[serde(default = "default_hidden")]
    pub hidden_size: usize,
    #[serde(default = "default_heads")]
    pub heads: usize,
    pub class_counts: BTreeMap<Task, usize>,
    pub dropout_rate: f64,
}

fn default_embed_dim() -> usize {
    300
}
fn default_hidden() -> usize {
    500
}
fn default_heads() -> usize {
    4
}

impl ModelSpec {
    pub fn tasks(&self) -> Vec<Task> {
        match self.variant {
            Variant::SingleTask(t) | Variant::GruBaseline(t) => vec![t],
            _ => Task::ALL.to_vec(),
        }
    }

    pub fn d_model(&self) -> usize {
        2 * self.hidden_size
    }

    fn validate(&self) -> Result<()> {
        let tasks = self.tasks();
        if self.class_counts.len() != tasks.len()
            || tasks.iter().any(|t| !self.class_counts.contains_key(t))
        {
            return Err(ModelError::InvalidSpec(format!(
                "class_counts must cover exactly the supervised tasks {:?}",
                tasks
            )));
        }
        if self.class_counts.values().any(|&c| c == 0) {
            return Err(ModelError::InvalidSpec("empty class set".into()));
        }
        if self.vocab_size == 0 || self.embed_dim == 0 || self.hidden_size == 0 {
            return Err(ModelError::InvalidSpec("zero dimension".into()));
        }
        let needs_attention = !matches!(self.variant, Variant::GruBaseline(_));
        if needs_attention && (self.heads == 0 || self.d_model() % self.heads != 0) {
            return Err(ModelError::InvalidSpec(format!(
                "d_model {} not divisible by heads {}",
                self.d_model(),
                self.heads
            )));
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return Err(ModelError::InvalidSpec(format!(
                "dropout_rate {} outside [0, 1)",
                self.dropout_rate
            )));
        }
        Ok(())
    }
}

/// One encoded input: token ids (PAD-padded) plus the real-token count.
#[derive(Debug, Clone)]
pub struct EncodedTweet {
    pub ids: Vec<usize>,
    pub mask_len: usize,
}

/// An attention tap: attention + pooled vector + softmax head reading one
/// trunk layer.
struct Tap {
    attn: MultiHeadAttentionParams,
    head: DenseParams,
    /// 1-based trunk layer this tap reads.
    layer: usize,
    task: Task,
}

pub struct Model {
    pub spec: ModelSpec,
    pub seed: u64,
    embedding: EmbeddingTable,
    trunk_bi: Vec<BiGruParams>,
    trunk_uni: Option<GruCellParams>,
    // MtlCommonAttn / SingleTask share one attention over the top layer.
    shared_attn: Option<MultiHeadAttentionParams>,
    taps: Vec<Tap>,
    // GruBaseline / shared-attention heads, keyed by task.
    heads: BTreeMap<Task, DenseParams>,
    params: Vec<Parameter>,
}

impl Model {
    /// Deterministic construction: identical (spec, seed) gives bitwise
    /// identical parameters.
    pub fn build(spec: ModelSpec, seed: u64) -> Result<Model> {
        spec.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d_model = spec.d_model();
        let embedding = EmbeddingTable::new(spec.vocab_size, spec.embed_dim, &mut rng);

        let mut trunk_bi = Vec::new();
        let mut trunk_uni = None;
        let mut shared_attn = None;
        let mut taps = Vec::new();
        let mut heads = BTreeMap::new();

        match spec.variant {
            Variant::GruBaseline(task) => {
                trunk_uni = Some(GruCellParams::new(
                    "gru",
                    spec.embed_dim,
                    spec.hidden_size,
                    &mut rng,
                ));
                heads.insert(
                    task,
                    DenseParams::new(
                        &format!("head.{}", task.name()),
                        spec.hidden_size,
                        spec.class_counts[&task],
                        &mut rng,
                    ),
                );
            }
            Variant::SingleTask(task) => {
                for l in 1..=3 {
                    let input = if l == 1 { spec.embed_dim } else { d_model };
                    trunk_bi.push(BiGruParams::new(
                        &format!("bigru{l}"),
                        input,
                        spec.hidden_size,
                        &mut rng,
                    ));
                }
                shared_attn = Some(MultiHeadAttentionParams::new("attn", d_model, spec.heads, &mut rng)?);
                heads.insert(
                    task,
                    DenseParams::new(
                        &format!("head.{}", task.name()),
                        d_model,
                        spec.class_counts[&task],
                        &mut rng,
                    ),
                );
            }
            Variant::MtlCommonAttn => {
                for l in 1..=3 {
                    let input = if l == 1 { spec.embed_dim } else { d_model };
                    trunk_bi.push(BiGruParams::new(
                        &format!("bigru{l}"),
                        input,
                        spec.hidden_size,
                        &mut rng,
                    ));
                }
                shared_attn = Some(MultiHeadAttentionParams::new("attn", d_model, spec.heads, &mut rng)?);
                for task in Task::ALL {
                    heads.insert(
                        task,
                        DenseParams::new(
                            &format!("head.{}", task.name()),
                            d_model,
                            spec.class_counts[&task],
                            &mut rng,
                        ),
                    );
                }
            }
            Variant::MtlSpecAttn => {
                for l in 1..=2 {
                    let input = if l == 1 { spec.embed_dim } else { d_model };
                    trunk_bi.push(BiGruParams::new(
                        &format!("bigru{l}"),
                        input,
                        spec.hidden_size,
                        &mut rng,
                    ));
                }
                for task in Task::ALL {
                    let attn = MultiHeadAttentionParams::new(
                        &format!("attn.{}", task.name()),
                        d_model,
                        spec.heads,
                        &mut rng,
                    )?;
                    let head = DenseParams::new(
                        &format!("head.{}", task.name()),
                        d_model,
                        spec.class_counts[&task],
                        &mut rng,
                    );
                    taps.push(Tap { attn, head, layer: 2, task });
                }
            }
            Variant::Hamtl(order) => {
                for l in 1..=4 {
                    let input = if l == 1 { spec.embed_dim } else { d_model };
                    trunk_bi.push(BiGruParams::new(
                        &format!("bigru{l}"),
                        input,
                        spec.hidden_size,
                        &mut rng,
                    ));
                }
                let layer_of = |task: Task| -> usize {
                    match (order, task) {
                        (_, Task::State) => 3,
                        (HamtlOrder::CityFirst, Task::City) => 2,
                        (HamtlOrder::CityFirst, Task::Country) => 4,
                        (HamtlOrder::CountryFirst, Task::City) => 4,
                        (HamtlOrder::CountryFirst, Task::Country) => 2,
                    }
                };
                for task in Task::ALL {
                    let attn = MultiHeadAttentionParams::new(
                        &format!("attn.{}", task.name()),
                        d_model,
                        spec.heads,
                        &mut rng,
                    )?;
                    let head = DenseParams::new(
                        &format!("head.{}", task.name()),
                        d_model,
                        spec.class_counts[&task],
                        &mut rng,
                    );
                    taps.push(Tap { attn, head, layer: layer_of(task), task });
                }
            }
        }

        // Declared parameter order for checkpoints and Adam slots:
        // embedding, trunk layers bottom-up, shared attention, taps in task
        // order, remaining heads in task order.
        let mut params = vec![embedding.table.clone()];
        for l in &trunk_bi {
            params.extend(l.parameters());
        }
        if let Some(u) = &trunk_uni {
            params.extend(u.parameters());
        }
        if let Some(a) = &shared_attn {
            params.extend(a.parameters());
        }
        for tap in &taps {
            params.extend(tap.attn.parameters());
            params.extend(tap.head.parameters());
        }
        for head in heads.values() {
            params.extend(head.parameters());
        }

        Ok(Model {
            spec,
            seed,
            embedding,
            trunk_bi,
            trunk_uni,
            shared_attn,
            taps,
            heads,
            params,
        })
    }

    /// Parameters in declared order.
    pub fn parameters(&self) -> &[Parameter] {
        &self.params
    }

    /// Parameters belonging to trunk layer `layer` (1-based).
    pub fn trunk_layer_parameters(&self, layer: usize) -> Vec<Parameter> {
        self.trunk_bi
            .get(layer - 1)
            .map(|l| l.parameters())
            .unwrap_or_default()
    }

    /// The trunk layer each task taps, when the variant uses per-task taps.
    pub fn tap_layer(&self, task: Task) -> Option<usize> {
        self.taps.iter().find(|t| t.task == task).map(|t| t.layer)
    }

    pub fn zero_grads(&self) {
        for p in &self.params {
            p.zero_grad();
        }
    }

    pub fn param_values(&self) -> Vec<Vec<f64>> {
        self.params.iter().map(|p| p.values()).collect()
    }

    pub fn set_param_values(&self, values: &[Vec<f64>]) {
        assert_eq!(values.len(), self.params.len());
        for (p, v) in self.params.iter().zip(values.iter()) {
            p.set_values(v);
        }
    }

    /// Forward one encoded tweet; returns per-task `[1 x C]` probability
    /// tensors still on the tape.
    fn forward_one(
        &self,
        tape: &Tape,
        tweet: &EncodedTweet,
        training: bool,
        dropout_seed: u64,
    ) -> Result<BTreeMap<Task, Tensor>> {
        for &id in &tweet.ids {
            if id >= self.spec.vocab_size {
                return Err(ModelError::VocabMismatch(id, self.spec.vocab_size));
            }
        }
        // Run the trunk over the real tokens only; padding rows carry no
        // information and every downstream op masks them anyway.
        let len = tweet.mask_len.min(tweet.ids.len()).max(1);
        let ids = &tweet.ids[..len.min(tweet.ids.len())];
        let embedded = embed_lookup(tape, ids, &self.embedding)?;
        let rate = self.spec.dropout_rate;

        if let Some(uni) = &self.trunk_uni {
            // unidirectional baseline: last state -> head
            let mut h = tape.constant(1, uni.hidden_size, vec![0.0; uni.hidden_size]);
            for t in 0..len {
                let x_t = embedded.slice_rows(t, t + 1)?;
                h = gru_cell_step(tape, &x_t, &h, uni)?;
            }
            let h = apply_dropout(&h, rate, training, dropout_seed)?;
            let (task, head) = self.heads.iter().next().expect("baseline head");
            let probs = classify_head(tape, &h, head)?;
            return Ok(BTreeMap::from([(*task, probs)]));
        }

        // BiGRU trunk; taps read each layer's pre-dropout output.
        let mut layer_out: Vec<Tensor> = Vec::with_capacity(self.trunk_bi.len());
        let mut x = embedded;
        for (i, layer) in self.trunk_bi.iter().enumerate() {
            let h = bigru_forward(tape, &x, len, layer)?;
            layer_out.push(h.clone());
            x = apply_dropout(&h, rate, training, dropout_seed.wrapping_add(1 + i as u64))?;
        }

        let mut out = BTreeMap::new();
        if let Some(attn) = &self.shared_attn {
            let top = layer_out.last().expect("trunk");
            let attended = crate::layers::multi_head_attention(tape, top, len, attn)?;
            let pooled = attention_pool(&attended, len)?;
            for (task, head) in &self.heads {
                out.insert(*task, classify_head(tape, &pooled, head)?);
            }
        }
        for tap in &self.taps {
            let source = &layer_out[tap.layer - 1];
            let attended = crate::layers::multi_head_attention(tape, source, len, &tap.attn)?;
            let pooled = attention_pool(&attended, len)?;
            out.insert(tap.task, classify_head(tape, &pooled, &tap.head)?);
        }
        Ok(out)
    }

    /// Forward a batch. Per-task probabilities come back as plain vectors;
    /// when `targets` is given, per-task mean cross-entropy losses stay on
    /// the tape for backward.
    pub fn forward_batch(
        &self,
        tape: &Tape,
        batch: &[EncodedTweet],
        targets: Option<&[BTreeMap<Task, usize>]>,
        training: bool,
        dropout_seed: u64,
    ) -> Result<ModelOutput> {
        let mut probs: BTreeMap<Task, Vec<Vec<f64>>> = BTreeMap::new();
        let mut example_losses: BTreeMap<Task, Vec<Tensor>> = BTreeMap::new();
        for (i, tweet) in batch.iter().enumerate() {
            let task_probs = self.forward_one(
                tape,
                tweet,
                training,
                dropout_seed.wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(i as u64),
            )?;
            for (task, p) in task_probs {
                probs.entry(task).or_default().push(p.value());
                if let Some(ts) = targets {
                    let target = ts[i][&task];
                    example_losses
                        .entry(task)
                        .or_default()
                        .push(p.cross_entropy(target)?);
                }
            }
        }
        let mut losses = BTreeMap::new();
        for (task, items) in example_losses {
            let stacked = Tensor::concat_rows(&items)?;
            losses.insert(task, stacked.mean_rows());
        }
        Ok(ModelOutput { probs, losses })
    }
}

pub struct ModelOutput {
    /// Per-task `[B][C]` probabilities.
    pub probs: BTreeMap<Task, Vec<Vec<f64>>>,
    /// Per-task mean cross-entropy over the batch (present iff targets
    /// were given).
    pub losses: BTreeMap<Task, Tensor>,
}

/// Eq. for the MTL objective: the arithmetic mean of the three task losses.
pub fn mtl_loss(task_losses: &BTreeMap<Task, Tensor>) -> Result<Tensor> {
    for task in Task::ALL {
        if !task_losses.contains_key(&task) {
            return Err(ModelError::MissingTaskLoss(task));
        }
    }
    let items: Vec<Tensor> = Task::ALL.iter().map(|t| task_losses[t].clone()).collect();
    Ok(Tensor::concat_rows(&items)?.mean_rows())
}

/// Combined training loss: MTL mean when all three tasks are supervised,
/// otherwise the single task's loss.
pub fn combined_loss(task_losses: &BTreeMap<Task, Tensor>) -> Result<Tensor> {
    if task_losses.len() == 3 {
        mtl_loss(task_losses)
    } else {
        task_losses
            .values()
            .next()
            .cloned()
            .ok_or(ModelError::MissingTaskLoss(Task::City))
    }
}

/// Metadata document stored at the head of a checkpoint file.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub spec: ModelSpec,
    pub vocab_hash: String,
    pub seed: u64,
    pub epoch: usize,
    #[serde(default)]
    pub dev_metrics: BTreeMap<String, f64>,
    /// Class label lists per task; index = class id.
    #[serde(default)]
    pub classes: BTreeMap<Task, Vec<String>>,
}

/// Write `meta` + all parameter tensors. Layout: 8-byte little-endian
/// metadata length, UTF-8 JSON metadata, then each parameter's values as
/// little-endian f64 in declared parameter order.
pub fn save_checkpoint(path: &Path, model: &Model, meta: &CheckpointMeta) -> Result<()> {
    let mut f = std::fs::File::create(path)?;
    let doc = serde_json::to_vec(meta).map_err(|e| ModelError::Corrupt(e.to_string()))?;
    f.write_all(&(doc.len() as u64).to_le_bytes())?;
    f.write_all(&doc)?;
    let mut buf = Vec::new();
    for p in model.parameters() {
        for v in p.values() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    f.write_all(&buf)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<(Model, CheckpointMeta)> {
    let mut f = std::fs::File::open(path)?;
    let mut len_bytes = [0u8; 8];
    f.read_exact(&mut len_bytes)?;
    let doc_len = u64::from_le_bytes(len_bytes) as usize;
    let mut doc = vec![0u8; doc_len];
    f.read_exact(&mut doc)?;
    let meta: CheckpointMeta =
        serde_json::from_slice(&doc).map_err(|e| ModelError::Corrupt(e.to_string()))?;
    let model = Model::build(meta.spec.clone(), meta.seed)?;
    let mut rest = Vec::new();
    f.read_to_end(&mut rest)?;
    let mut offset = 0;
    for p in model.parameters() {
        let n = p.len() * 8;
        if offset + n > rest.len() {
            return Err(ModelError::Corrupt("truncated parameter data".into()));
        }
        let vals: Vec<f64> = rest[offset..offset + n]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        p.set_values(&vals);
        offset += n;
    }
    if offset != rest.len() {
        return Err(ModelError::Corrupt("trailing bytes".into()));
    }
    Ok((model, meta))
}
