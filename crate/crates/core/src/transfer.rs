//! Transfer evaluation: logistic-regression probes on frozen encodings and
//! micro/macro aggregation across tasks.

use std::collections::HashSet;
use std::fmt::Write as _;
use std::fs::{self, File};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::Graph;
use crate::corpus::{is_subsequence, tokenize, toy_tokens, Vocab, CONTENT_TOKENS};
use crate::error::{Error, Result};
use crate::head::build_features;
use crate::model::Model;
use crate::tensor::NumArray;
use crate::train::{clip_global_norm, lr_update, sgd_step, TrainConfig};

/// One encoding row per sentence, in input order.
pub fn encode_dataset(model: &Model, vocab: &Vocab, sentences: &[String]) -> Result<NumArray> {
    if sentences.is_empty() {
        return Err(Error::Empty("encode_dataset"));
    }
    let rows = sentences
        .iter()
        .map(|s| model.encode_ids(&vocab.encode(&tokenize(s))))
        .collect::<Result<Vec<_>>>()?;
    NumArray::from_rows(&rows)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ProbeItem {
    pub split: Split,
    pub text: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub text2: Option<String>,
    pub label: usize,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ProbeTask {
    pub name: String,
    /// Items carry a second sentence.
    pub pairs: bool,
    pub num_classes: usize,
    pub train: Vec<ProbeItem>,
    pub val: Vec<ProbeItem>,
}

impl ProbeTask {
    /// Checks class count, split membership and train/val disjointness.
    pub fn from_items(name: impl Into<String>, items: Vec<ProbeItem>) -> Result<Self> {
        let name = name.into();
        let bad = |msg: String| Error::Config(format!("task `{name}`: {msg}"));
        let pairs = items.first().is_some_and(|i| i.text2.is_some());
        if items.iter().any(|i| i.text2.is_some() != pairs) {
            return Err(bad("mixes single sentences and pairs".into()));
        }
        let num_classes = items.iter().map(|i| i.label + 1).max().unwrap_or(0);
        if num_classes < 2 {
            return Err(bad("needs at least two classes".into()));
        }
        let (train, val): (Vec<_>, Vec<_>) = items.into_iter().partition(|i| i.split == Split::Train);
        if train.is_empty() || val.is_empty() {
            return Err(bad("both train and val splits must be non-empty".into()));
        }
        let seen: HashSet<(&str, Option<&str>)> = train.iter().map(|i| (i.text.as_str(), i.text2.as_deref())).collect();
        if let Some(dup) = val.iter().find(|i| seen.contains(&(i.text.as_str(), i.text2.as_deref()))) {
            return Err(bad(format!("`{}` appears in both splits", dup.text)));
        }
        Ok(Self {
            name,
            pairs,
            num_classes,
            train,
            val,
        })
    }

    fn features(&self, model: &Model, vocab: &Vocab, items: &[ProbeItem]) -> Result<(NumArray, Vec<usize>)> {
        let first: Vec<String> = items.iter().map(|i| i.text.clone()).collect();
        let u = encode_dataset(model, vocab, &first)?;
        let x = if self.pairs {
            let second: Vec<String> = items.iter().map(|i| i.text2.clone().unwrap_or_default()).collect();
            let v = encode_dataset(model, vocab, &second)?;
            let rows = (0..items.len())
                .map(|r| build_features(u.row(r), v.row(r)))
                .collect::<Result<Vec<_>>>()?;
            NumArray::from_rows(&rows)?
        } else {
            u
        };
        Ok((x, items.iter().map(|i| i.label).collect()))
    }
}

/// Defaults for probe training: the usual schedule with smaller batches.
pub fn probe_config(seed: u64) -> TrainConfig {
    TrainConfig {
        batch_size: 16,
        max_epochs: 30,
        seed,
        ..TrainConfig::default()
    }
}

fn standardize(train: &NumArray, other: &NumArray) -> Result<(NumArray, NumArray)> {
    let (n, k) = (train.rows(), train.cols());
    let mut mean = vec![0.0; k];
    for r in 0..n {
        for (m, x) in mean.iter_mut().zip(train.row(r)) {
            *m += x / n as f64;
        }
    }
    let mut std = vec![0.0; k];
    for r in 0..n {
        for ((s, x), m) in std.iter_mut().zip(train.row(r)).zip(&mean) {
            *s += (x - m) * (x - m) / n as f64;
        }
    }
    let scale: Vec<f64> = std.iter().map(|s| if s.sqrt() > 1e-12 { 1.0 / s.sqrt() } else { 0.0 }).collect();
    let apply = |a: &NumArray| {
        let mut out = a.clone();
        let data = out.data_mut();
        for (j, x) in data.iter_mut().enumerate() {
            let c = j % k;
            *x = (*x - mean[c]) * scale[c];
        }
        out
    };
    Ok((apply(train), apply(other)))
}

fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &z) in row.iter().enumerate() {
        if z > row[best] {
            best = i;
        }
    }
    best
}

/// Multinomial logistic regression on standardized features. Returns the
/// best validation accuracy over the epochs, in `[0, 1]`.
pub fn probe_train(
    train_x: &NumArray,
    train_y: &[usize],
    val_x: &NumArray,
    val_y: &[usize],
    num_classes: usize,
    cfg: &TrainConfig,
) -> Result<f64> {
    cfg.validate()?;
    if train_x.rows() != train_y.len() || val_x.rows() != val_y.len() {
        return Err(Error::shape("probe_train", &[train_x.rows(), val_x.rows()], &[train_y.len(), val_y.len()]));
    }
    if train_x.cols() != val_x.cols() {
        return Err(Error::shape("probe_train", train_x.shape(), val_x.shape()));
    }
    if val_y.is_empty() {
        return Err(Error::Empty("probe_train: validation split"));
    }
    if let Some(&y) = train_y.iter().chain(val_y).find(|&&y| y >= num_classes) {
        return Err(Error::InvalidLabel(y));
    }
    let classes: HashSet<usize> = train_y.iter().copied().collect();
    if classes.len() < 2 {
        return Err(Error::Config("probe training split has fewer than two classes".into()));
    }
    let (tx, vx) = standardize(train_x, val_x)?;
    let k = tx.cols();
    let mut params = vec![NumArray::zeros(&[k, num_classes]), NumArray::zeros(&[num_classes])];
    let mut order: Vec<usize> = (0..train_y.len()).collect();
    let mut lr = cfg.lr0;
    let mut prev = None;
    let mut best: f64 = 0.0;

    for epoch in 1..=cfg.max_epochs {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ (epoch as u64).wrapping_mul(0x9E37_79B9));
        order.shuffle(&mut rng);
        for chunk in order.chunks(cfg.batch_size) {
            let mut g = Graph::new();
            let rows: Vec<Vec<f64>> = chunk.iter().map(|&i| tx.row(i).to_vec()).collect();
            let x = g.constant(NumArray::from_rows(&rows)?)?;
            let w = g.param(params[0].clone())?;
            let b = g.param(params[1].clone())?;
            let xw = g.matmul(x, w)?;
            let z = g.add_row_bias(xw, b)?;
            let labels: Vec<usize> = chunk.iter().map(|&i| train_y[i]).collect();
            let loss = g.softmax_cross_entropy(z, &labels)?;
            g.backward(loss)?;
            let mut grads = vec![g.grad_or_zeros(w), g.grad_or_zeros(b)];
            clip_global_norm(&mut grads, cfg.clip_norm)?;
            sgd_step(&mut params, &grads, lr)?;
        }
        let logits = vx.matmul(&params[0])?;
        let correct = (0..val_y.len())
            .filter(|&r| {
                let row: Vec<f64> = logits.row(r).iter().zip(params[1].data()).map(|(a, b)| a + b).collect();
                argmax(&row) == val_y[r]
            })
            .count();
        let acc = correct as f64 / val_y.len() as f64;
        best = best.max(acc);
        lr = lr_update(cfg, lr, prev, acc);
        prev = Some(acc);
        if lr < cfg.min_lr {
            break;
        }
    }
    Ok(best)
}

/// Size-weighted (micro) and unweighted (macro) means.
pub fn micro_macro(accs: &[f64], sizes: &[usize]) -> Result<(f64, f64)> {
    if accs.len() != sizes.len() {
        return Err(Error::shape("micro_macro", &[accs.len()], &[sizes.len()]));
    }
    if accs.is_empty() {
        return Err(Error::Empty("micro_macro"));
    }
    if sizes.contains(&0) {
        return Err(Error::Config("task sizes must be positive".into()));
    }
    let total: usize = sizes.iter().sum();
    let micro = accs.iter().zip(sizes).map(|(a, &n)| a * (n as f64 / total as f64)).sum::<f64>();
    let macro_ = accs.iter().sum::<f64>() / accs.len() as f64;
    Ok((micro, macro_))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskScore {
    pub task: String,
    /// Percent.
    pub accuracy: f64,
    /// Validation examples; the micro-average weight.
    pub size: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TransferReport {
    pub tasks: Vec<TaskScore>,
    pub micro: f64,
    pub macro_avg: f64,
}

#[derive(Serialize)]
struct SummaryLine {
    micro: f64,
    #[serde(rename = "macro")]
    macro_avg: f64,
}

impl TransferReport {
    pub fn from_scores(tasks: Vec<TaskScore>) -> Result<Self> {
        let accs: Vec<f64> = tasks.iter().map(|t| t.accuracy).collect();
        let sizes: Vec<usize> = tasks.iter().map(|t| t.size).collect();
        let (micro, macro_avg) = micro_macro(&accs, &sizes)?;
        Ok(Self { tasks, micro, macro_avg })
    }

    pub fn table(&self) -> String {
        let w = self.tasks.iter().map(|t| t.task.len()).max().unwrap_or(0).max("micro / macro".len());
        let mut s = String::new();
        let _ = writeln!(s, "{:<w$}  {:>8}  {:>6}", "task", "acc", "n");
        for t in &self.tasks {
            let _ = writeln!(s, "{:<w$}  {:>8.1}  {:>6}", t.task, t.accuracy, t.size);
        }
        let _ = writeln!(s, "{:<w$}  {:.1} / {:.1}", "micro / macro", self.micro, self.macro_avg);
        s
    }

    /// One line per task, then a `{"micro", "macro"}` line.
    pub fn write_jsonl(&self, path: &Path) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        for t in &self.tasks {
            serde_json::to_writer(&mut w, t)?;
            w.write_all(b"\n")?;
        }
        let summary = SummaryLine {
            micro: self.micro,
            macro_avg: self.macro_avg,
        };
        serde_json::to_writer(&mut w, &summary)?;
        w.write_all(b"\n")?;
        w.flush()?;
        Ok(())
    }
}

/// Trains one probe per task on frozen encodings from `model`.
pub fn evaluate_tasks(model: &Model, vocab: &Vocab, tasks: &[ProbeTask], seed: u64) -> Result<TransferReport> {
    let mut scores = Vec::with_capacity(tasks.len());
    for (k, task) in tasks.iter().enumerate() {
        let (tx, ty) = task.features(model, vocab, &task.train)?;
        let (vx, vy) = task.features(model, vocab, &task.val)?;
        let cfg = probe_config(seed.wrapping_add(k as u64));
        let acc = probe_train(&tx, &ty, &vx, &vy, task.num_classes, &cfg)?;
        scores.push(TaskScore {
            task: task.name.clone(),
            accuracy: 100.0 * acc,
            size: task.val.len(),
        });
    }
    TransferReport::from_scores(scores)
}

/// Reads every `*.jsonl` file in `dir` as one task named after the file.
pub fn load_tasks(dir: &Path) -> Result<Vec<ProbeTask>> {
    let mut paths: Vec<PathBuf> = fs::read_dir(dir)?
        .map(|e| e.map(|e| e.path()))
        .collect::<std::io::Result<_>>()?;
    paths.retain(|p| p.extension().is_some_and(|e| e == "jsonl"));
    paths.sort();
    if paths.is_empty() {
        return Err(Error::Config(format!("no .jsonl task files in {}", dir.display())));
    }
    let mut tasks = Vec::with_capacity(paths.len());
    for path in paths {
        let mut items = Vec::new();
        for (i, line) in BufReader::new(File::open(&path)?).lines().enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let item: ProbeItem = serde_json::from_str(&line).map_err(|e| Error::Parse {
                path: path.clone(),
                line: i + 1,
                msg: e.to_string(),
            })?;
            items.push(item);
        }
        let name = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
        tasks.push(ProbeTask::from_items(name, items)?);
    }
    Ok(tasks)
}

pub fn write_tasks(dir: &Path, tasks: &[ProbeTask]) -> Result<()> {
    fs::create_dir_all(dir)?;
    for task in tasks {
        let mut w = BufWriter::new(File::create(dir.join(format!("{}.jsonl", task.name)))?);
        for item in task.train.iter().chain(&task.val) {
            serde_json::to_writer(&mut w, item)?;
            w.write_all(b"\n")?;
        }
        w.flush()?;
    }
    Ok(())
}

fn content_tokens<R: Rng>(rng: &mut R, len: usize) -> Vec<String> {
    let all = toy_tokens();
    rand::seq::index::sample(rng, CONTENT_TOKENS, len)
        .into_iter()
        .map(|i| all[i].clone())
        .collect()
}

fn unique_items<R: Rng>(
    rng: &mut R,
    train: usize,
    val: usize,
    classes: usize,
    mut make: impl FnMut(&mut R, usize) -> (String, Option<String>),
) -> Vec<ProbeItem> {
    let mut seen = HashSet::new();
    let mut out = Vec::with_capacity(train + val);
    while out.len() < train + val {
        let label = out.len() % classes;
        let (text, text2) = make(rng, label);
        if seen.insert((text.clone(), text2.clone())) {
            let split = if out.len() < train { Split::Train } else { Split::Val };
            out.push(ProbeItem {
                split,
                text,
                text2,
                label,
            });
        }
    }
    out
}

/// Three small probe tasks over the toy vocabulary: distractor detection,
/// ordered overlap between two sentences, and a 3-way length bucket.
pub fn toy_probe_tasks(seed: u64) -> Result<Vec<ProbeTask>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let tokens = toy_tokens();
    let distractors = &tokens[CONTENT_TOKENS..];

    let distractor = unique_items(&mut rng, 400, 200, 2, |rng, label| {
        let len = rng.gen_range(3..=8);
        let mut s = content_tokens(rng, len);
        if label == 1 {
            let at = rng.gen_range(0..len);
            s[at] = distractors.choose(rng).expect("non-empty").clone();
        }
        (s.join(" "), None)
    });

    let overlap = unique_items(&mut rng, 400, 100, 2, |rng, label| {
        let len = rng.gen_range(4..=8);
        let premise = content_tokens(rng, len);
        let hyp = loop {
            let k = rng.gen_range(2..=4);
            let h = if label == 1 {
                let mut idx = rand::seq::index::sample(rng, len, k).into_vec();
                idx.sort_unstable();
                idx.into_iter().map(|i| premise[i].clone()).collect()
            } else {
                content_tokens(rng, k)
            };
            if (label == 1) == is_subsequence(&h, &premise) {
                break h;
            }
        };
        (premise.join(" "), Some(hyp.join(" ")))
    });

    let length = unique_items(&mut rng, 300, 150, 3, |rng, label| {
        let len = rng.gen_range(2 + 3 * label..=4 + 3 * label);
        (content_tokens(rng, len).join(" "), None)
    });

    Ok(vec![
        ProbeTask::from_items("distractor", distractor)?,
        ProbeTask::from_items("overlap", overlap)?,
        ProbeTask::from_items("length", length)?,
    ])
}
