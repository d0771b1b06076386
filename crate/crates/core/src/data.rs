//! Synthetic token streams and batching.

use std::fmt;
use std::path::PathBuf;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{config_err, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModOp {
    Add,
    Sub,
    Mul,
}

impl ModOp {
    pub fn apply(self, a: usize, b: usize, m: usize) -> usize {
        match self {
            ModOp::Add => (a + b) % m,
            ModOp::Sub => (a + m - b) % m,
            ModOp::Mul => (a * b) % m,
        }
    }

    fn symbol(self) -> &'static str {
        match self {
            ModOp::Add => "+",
            ModOp::Sub => "-",
            ModOp::Mul => "*",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum TaskKind {
    /// Byte-level language modelling over a plain-text file. The first 90% of
    /// the file feeds training, the rest evaluation.
    CharLmFromFile { path: PathBuf },
    /// `a op b = c ;` with `c = (a op b) mod modulus`.
    ModularArithmetic { modulus: usize, ops: Vec<ModOp> },
    /// `s | s ;` for a random span `s` of `span_len` symbols.
    TokenCopy { span_len: usize, alphabet: usize },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyntheticTask {
    #[serde(flatten)]
    pub kind: TaskKind,
    #[serde(default = "default_train_seed")]
    pub train_seed: u64,
    #[serde(default = "default_eval_seed")]
    pub eval_seed: u64,
}

fn default_train_seed() -> u64 {
    1
}

fn default_eval_seed() -> u64 {
    2
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    Train,
    Eval,
}

impl Default for SyntheticTask {
    fn default() -> Self {
        SyntheticTask {
            kind: TaskKind::ModularArithmetic {
                modulus: 7,
                ops: vec![ModOp::Add],
            },
            train_seed: default_train_seed(),
            eval_seed: default_eval_seed(),
        }
    }
}

impl SyntheticTask {
    pub fn modular(modulus: usize, ops: Vec<ModOp>) -> Self {
        SyntheticTask {
            kind: TaskKind::ModularArithmetic { modulus, ops },
            ..Default::default()
        }
    }

    pub fn token_copy(span_len: usize, alphabet: usize) -> Self {
        SyntheticTask {
            kind: TaskKind::TokenCopy { span_len, alphabet },
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.train_seed == self.eval_seed {
            return Err(config_err("train and eval seeds must differ"));
        }
        match &self.kind {
            TaskKind::ModularArithmetic { modulus, ops } => {
                if *modulus < 2 || ops.is_empty() {
                    return Err(config_err("modular arithmetic needs modulus >= 2 and at least one op"));
                }
            }
            TaskKind::TokenCopy { span_len, alphabet } => {
                if *span_len == 0 || *alphabet < 2 {
                    return Err(config_err("token copy needs span_len >= 1 and alphabet >= 2"));
                }
            }
            TaskKind::CharLmFromFile { .. } => {}
        }
        Ok(())
    }

    pub fn vocab_size(&self) -> usize {
        match &self.kind {
            TaskKind::CharLmFromFile { .. } => 256,
            TaskKind::ModularArithmetic { modulus, ops } => modulus + ops.len() + 2,
            TaskKind::TokenCopy { alphabet, .. } => alphabet + 2,
        }
    }

    pub fn seed(&self, split: Split) -> u64 {
        match split {
            Split::Train => self.train_seed,
            Split::Eval => self.eval_seed,
        }
    }

    /// Human-readable form of a token.
    pub fn render(&self, token: usize) -> String {
        match &self.kind {
            TaskKind::CharLmFromFile { .. } => {
                let b = token as u8;
                if b.is_ascii_graphic() || b == b' ' {
                    (b as char).to_string()
                } else {
                    format!("\\x{b:02x}")
                }
            }
            TaskKind::ModularArithmetic { modulus, ops } => {
                if token < *modulus {
                    token.to_string()
                } else if token < modulus + ops.len() {
                    ops[token - modulus].symbol().to_string()
                } else if token == modulus + ops.len() {
                    "=".into()
                } else {
                    ";".into()
                }
            }
            TaskKind::TokenCopy { alphabet, .. } => {
                if token < *alphabet {
                    format!("s{token}")
                } else if token == *alphabet {
                    "|".into()
                } else {
                    ";".into()
                }
            }
        }
    }

    /// Whether `token` ends a record; used to break rendered output into lines.
    pub fn is_separator(&self, token: usize) -> bool {
        match &self.kind {
            TaskKind::CharLmFromFile { .. } => token == b'\n' as usize,
            _ => token == self.vocab_size() - 1,
        }
    }
}

/// Tokens plus a mask of positions that count towards task accuracy.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct TokenStream {
    pub tokens: Vec<usize>,
    pub answer: Vec<bool>,
}

impl TokenStream {
    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    fn push(&mut self, token: usize, answer: bool) {
        self.tokens.push(token);
        self.answer.push(answer);
    }
}

impl fmt::Display for TokenStream {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let ids: Vec<String> = self.tokens.iter().map(|t| t.to_string()).collect();
        write!(f, "{}", ids.join(" "))
    }
}

/// An endless token source for one task split.
pub struct TaskSource {
    task: SyntheticTask,
    rng: ChaCha8Rng,
    pending: TokenStream,
    cursor: usize,
    text: Option<(Arc<Vec<u8>>, usize, usize)>,
}

impl TaskSource {
    pub fn new(task: &SyntheticTask, rng: ChaCha8Rng, split: Split) -> Result<Self> {
        task.validate()?;
        let text = match &task.kind {
            TaskKind::CharLmFromFile { path } => {
                let bytes = std::fs::read(path)?;
                if bytes.len() < 20 {
                    return Err(config_err(format!("{} is too short for a corpus", path.display())));
                }
                let cut = bytes.len() * 9 / 10;
                let (lo, hi) = match split {
                    Split::Train => (0, cut),
                    Split::Eval => (cut, bytes.len()),
                };
                Some((Arc::new(bytes), lo, hi))
            }
            _ => None,
        };
        let mut source = TaskSource {
            task: task.clone(),
            rng,
            pending: TokenStream::default(),
            cursor: 0,
            text,
        };
        if let Some((_, lo, hi)) = source.text {
            source.cursor = source.rng.gen_range(lo..hi);
        }
        Ok(source)
    }

    /// Source for `split` seeded from the task's split seed.
    pub fn for_split(task: &SyntheticTask, split: Split) -> Result<Self> {
        Self::new(task, ChaCha8Rng::seed_from_u64(task.seed(split)), split)
    }

    fn refill(&mut self) {
        match &self.task.kind {
            TaskKind::ModularArithmetic { modulus, ops } => {
                let m = *modulus;
                let a = self.rng.gen_range(0..m);
                let b = self.rng.gen_range(0..m);
                let op_idx = self.rng.gen_range(0..ops.len());
                let c = ops[op_idx].apply(a, b, m);
                self.pending.push(a, false);
                self.pending.push(m + op_idx, false);
                self.pending.push(b, false);
                self.pending.push(m + ops.len(), false);
                self.pending.push(c, true);
                self.pending.push(m + ops.len() + 1, false);
            }
            TaskKind::TokenCopy { span_len, alphabet } => {
                let span: Vec<usize> = (0..*span_len).map(|_| self.rng.gen_range(0..*alphabet)).collect();
                for &s in &span {
                    self.pending.push(s, false);
                }
                self.pending.push(*alphabet, false);
                for &s in &span {
                    self.pending.push(s, true);
                }
                self.pending.push(alphabet + 1, false);
            }
            TaskKind::CharLmFromFile { .. } => {
                let (bytes, lo, hi) = self.text.as_ref().expect("loaded");
                let end = (self.cursor + 4096).min(*hi);
                for &b in &bytes[self.cursor..end] {
                    self.pending.push(b as usize, true);
                }
                self.cursor = if end == *hi { *lo } else { end };
            }
        }
    }

    /// Next `n` tokens of the stream.
    pub fn take(&mut self, n: usize) -> TokenStream {
        let mut out = TokenStream {
            tokens: Vec::with_capacity(n),
            answer: Vec::with_capacity(n),
        };
        while out.len() < n {
            if self.pending.is_empty() {
                self.refill();
            }
            let want = (n - out.len()).min(self.pending.len());
            out.tokens.extend(self.pending.tokens.drain(..want));
            out.answer.extend(self.pending.answer.drain(..want));
        }
        out
    }
}

/// `num_tokens` tokens of `task` drawn with `rng`.
pub fn generate_synthetic(task: &SyntheticTask, num_tokens: usize, rng: ChaCha8Rng) -> Result<TokenStream> {
    Ok(TaskSource::new(task, rng, Split::Train)?.take(num_tokens))
}

/// Packed next-token batch: `inputs[i]` predicts `targets[i]`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Batch {
    pub inputs: Vec<usize>,
    pub targets: Vec<usize>,
    /// Whether each target counts towards task accuracy.
    pub answer: Vec<bool>,
    pub seq_len: usize,
}

impl Batch {
    /// Cuts `stream` into consecutive windows of `seq_len + 1` tokens.
    /// A trailing partial window is dropped.
    pub fn from_stream(stream: &TokenStream, seq_len: usize) -> Batch {
        let mut b = Batch {
            inputs: Vec::new(),
            targets: Vec::new(),
            answer: Vec::new(),
            seq_len,
        };
        for w in 0..stream.len() / (seq_len + 1) {
            let s = w * (seq_len + 1);
            b.inputs.extend_from_slice(&stream.tokens[s..s + seq_len]);
            b.targets.extend_from_slice(&stream.tokens[s + 1..s + seq_len + 1]);
            b.answer.extend_from_slice(&stream.answer[s + 1..s + seq_len + 1]);
        }
        b
    }

    pub fn num_sequences(&self) -> usize {
        self.inputs.len() / self.seq_len.max(1)
    }

    pub fn num_tokens(&self) -> usize {
        self.inputs.len()
    }

    /// Sequences `[from, to)` as a separate batch.
    pub fn slice(&self, from: usize, to: usize) -> Batch {
        let (a, b) = (from * self.seq_len, to * self.seq_len);
        Batch {
            inputs: self.inputs[a..b].to_vec(),
            targets: self.targets[a..b].to_vec(),
            answer: self.answer[a..b].to_vec(),
            seq_len: self.seq_len,
        }
    }
}

/// Generator for the held-out split: keyed by the task's eval seed, on
/// `stream`.
pub fn eval_rng(task: &SyntheticTask, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(task.eval_seed);
    rng.set_stream(stream);
    rng
}

/// Held-out sequences covering at most `num_tokens` predicted positions
/// (at least one sequence).
pub fn eval_batch(task: &SyntheticTask, num_tokens: usize, seq_len: usize, stream: u64) -> Result<Batch> {
    let seqs = (num_tokens / seq_len.max(1)).max(1);
    let mut source = TaskSource::new(task, eval_rng(task, stream), Split::Eval)?;
    Ok(Batch::from_stream(&source.take(seqs * (seq_len + 1)), seq_len))
}
