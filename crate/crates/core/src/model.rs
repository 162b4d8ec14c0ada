//! Embeddings, encoder and head bundled into one trainable model.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Graph, NodeId};
use crate::corpus::{EmbeddingTable, NliBatch, NliExample, PaddedIds, PAD_ID};
use crate::encoder::{EncoderConfig, EncoderNodes, EncoderParams, Variant};
use crate::error::{Error, Result};
use crate::gradcheck::{grad_check, GradCheckConfig, GradCheckReport, Parameterized};
use crate::head::{build_features_node, Activation, HeadConfig, HeadNodes, HeadParams, NliLabel};
use crate::tensor::NumArray;

pub const EMBEDDINGS_NAME: &str = "embeddings";

#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub encoder_config: EncoderConfig,
    pub encoder: EncoderParams,
    pub head: HeadParams,
    pub embeddings: EmbeddingTable,
}

/// Output of one forward pass over a batch.
pub struct BatchOutput {
    pub loss: f64,
    /// `B × 3`
    pub logits: NumArray,
    /// Gradients in [`Parameterized::params`] order; empty when not requested.
    pub grads: Vec<NumArray>,
}

impl Model {
    /// Seeded initialisation of encoder and head around an existing table.
    pub fn init(encoder_config: EncoderConfig, head_config: HeadConfig, embeddings: EmbeddingTable, seed: u64) -> Result<Self> {
        if embeddings.dim() != encoder_config.embed {
            return Err(Error::Config(format!(
                "embedding width {} does not match encoder input size {}",
                embeddings.dim(),
                encoder_config.embed
            )));
        }
        if head_config.encoding_dim != encoder_config.encoding_dim() {
            return Err(Error::Config(format!(
                "head expects encodings of {} values, encoder produces {}",
                head_config.encoding_dim,
                encoder_config.encoding_dim()
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let encoder = EncoderParams::init(&encoder_config, &mut rng);
        let head = HeadParams::init(head_config, &mut rng);
        Ok(Self {
            encoder_config,
            encoder,
            head,
            embeddings,
        })
    }

    pub fn encoding_dim(&self) -> usize {
        self.encoder_config.encoding_dim()
    }

    fn bind(&self, g: &mut Graph, trainable: bool) -> Result<Bound> {
        let table = if trainable && self.embeddings.trainable {
            g.param(self.embeddings.table.clone())?
        } else {
            g.constant(self.embeddings.table.clone())?
        };
        let encoder = EncoderNodes::bind(g, &self.encoder_config, &self.encoder, trainable)?;
        let head = HeadNodes::bind(g, &self.head, trainable)?;
        Ok(Bound { table, encoder, head })
    }

    /// Runs the batch forward; with `with_grads`, also backward.
    pub fn forward_batch(&self, batch: &NliBatch, with_grads: bool) -> Result<BatchOutput> {
        if batch.is_empty() {
            return Err(Error::Empty("forward_batch"));
        }
        let mut g = Graph::new();
        let bound = self.bind(&mut g, with_grads)?;

        // one gather for the whole batch, then a slice per sentence
        let mut all_ids = batch.premise.ids.clone();
        all_ids.extend_from_slice(&batch.hypothesis.ids);
        let embedded = g.select_rows(bound.table, &all_ids)?;
        let premise = encode_rows(&mut g, &bound.encoder, embedded, 0, &batch.premise)?;
        let offset = batch.premise.ids.len();
        let hypothesis = encode_rows(&mut g, &bound.encoder, embedded, offset, &batch.hypothesis)?;

        let features = build_features_node(&mut g, premise, hypothesis)?;
        let logits = bound.head.logits(&mut g, features)?;
        let loss = g.softmax_cross_entropy(logits, &batch.label_indices())?;

        let mut out = BatchOutput {
            loss: g.value(loss).item(),
            logits: g.value(logits).clone(),
            grads: Vec::new(),
        };
        if with_grads {
            g.backward(loss)?;
            let mut leaves: Vec<NodeId> = bound.encoder.leaves().to_vec();
            leaves.extend_from_slice(bound.head.leaves());
            if self.embeddings.trainable {
                leaves.push(bound.table);
            }
            out.grads = leaves.into_iter().map(|id| g.grad_or_zeros(id)).collect();
            if self.embeddings.trainable {
                let d = self.embeddings.dim();
                let table_grad = out.grads.last_mut().expect("embedding gradient present");
                table_grad.data_mut()[PAD_ID * d..(PAD_ID + 1) * d].iter_mut().for_each(|x| *x = 0.0);
            }
        }
        Ok(out)
    }

    /// Encodes one id sequence (all positions real).
    pub fn encode_ids(&self, ids: &[usize]) -> Result<Vec<f64>> {
        if ids.is_empty() {
            return Err(Error::Empty("encode_ids"));
        }
        let mut g = Graph::new();
        let bound = self.bind(&mut g, false)?;
        let x = g.select_rows(bound.table, ids)?;
        let u = bound.encoder.encode(&mut g, x, &vec![true; ids.len()])?;
        Ok(g.value(u).data().to_vec())
    }
}

struct Bound {
    table: NodeId,
    encoder: EncoderNodes,
    head: HeadNodes,
}

fn encode_rows(g: &mut Graph, encoder: &EncoderNodes, embedded: NodeId, offset: usize, padded: &PaddedIds) -> Result<NodeId> {
    let w = padded.width;
    let mut rows = Vec::with_capacity(padded.rows);
    for r in 0..padded.rows {
        let start = offset + r * w;
        let x = g.slice_rows(embedded, start, start + w)?;
        let (_, mask) = padded.row(r);
        rows.push(encoder.encode(g, x, mask)?);
    }
    g.vconcat(&rows)
}

impl Parameterized for Model {
    fn param_names(&self) -> Vec<String> {
        let mut names = self.encoder.array_names();
        names.extend(self.head.array_names());
        if self.embeddings.trainable {
            names.push(EMBEDDINGS_NAME.to_string());
        }
        names
    }

    fn params(&self) -> Vec<&NumArray> {
        let mut out = self.encoder.arrays();
        out.extend(self.head.arrays());
        if self.embeddings.trainable {
            out.push(&self.embeddings.table);
        }
        out
    }

    fn params_mut(&mut self) -> Vec<&mut NumArray> {
        let mut out = self.encoder.arrays_mut();
        out.extend(self.head.arrays_mut());
        if self.embeddings.trainable {
            out.push(&mut self.embeddings.table);
        }
        out
    }
}

/// Settings for a whole-model gradient check on a random two-example batch.
#[derive(Debug, Clone, Copy)]
pub struct ModelCheckSpec {
    pub variant: Variant,
    pub hidden: usize,
    pub embed: usize,
    /// Length of every premise and hypothesis.
    pub len: usize,
    pub fc_dim: usize,
    pub vocab_len: usize,
    pub seed: u64,
    /// Add 1e-3 to one analytic gradient entry before comparing.
    pub corrupt: bool,
}

impl ModelCheckSpec {
    pub fn new(variant: Variant, hidden: usize, embed: usize, len: usize, seed: u64) -> Self {
        Self {
            variant,
            hidden,
            embed,
            len,
            fc_dim: 16,
            vocab_len: 12,
            seed,
            corrupt: false,
        }
    }
}

/// Builds a seeded model and batch, then compares backprop gradients of the
/// mean batch loss with central differences for every parameter array,
/// embeddings included.
pub fn check_model_gradients(spec: &ModelCheckSpec, cfg: &GradCheckConfig) -> Result<GradCheckReport> {
    if spec.len == 0 || spec.vocab_len < 3 {
        return Err(Error::Config("gradient check needs len >= 1 and at least 3 vocabulary rows".into()));
    }
    let enc = EncoderConfig::new(spec.variant, spec.hidden, spec.embed)?;
    let head = HeadConfig {
        encoding_dim: enc.encoding_dim(),
        fc_dim: spec.fc_dim,
        activation: Activation::Tanh,
    };
    let table = EmbeddingTable::random(spec.vocab_len, spec.embed, spec.seed.wrapping_add(1)).with_trainable(true);
    let mut model = Model::init(enc, head, table, spec.seed)?;

    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed.wrapping_add(2));
    let ids = |rng: &mut ChaCha8Rng| (0..spec.len).map(|_| rng.gen_range(2..spec.vocab_len)).collect::<Vec<_>>();
    let examples: Vec<NliExample> = (0..2)
        .map(|_| NliExample {
            premise: ids(&mut rng),
            hypothesis: ids(&mut rng),
            label: NliLabel::ALL[rng.gen_range(0..3)],
        })
        .collect();
    let batch = NliBatch::from_examples(&[&examples[0], &examples[1]]);

    let mut grads = model.forward_batch(&batch, true)?.grads;
    if spec.corrupt {
        let last = grads.len() - 2;
        grads[last].data_mut()[0] += 1e-3;
    }
    grad_check(&mut model, &grads, |m| Ok(m.forward_batch(&batch, false)?.loss), cfg)
}
