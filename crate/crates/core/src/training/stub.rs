//! Deterministic hashed bag-of-words softmax classifier.
//!
//! Stands in for a pretrained encoder wherever GPUs are unavailable. It
//! honours the same contract (special tokens, truncation budget, warmup,
//! weight decay, dropout, weighted loss) so the surrounding pipeline is
//! exercised end to end.

use rand_chacha::ChaCha8Rng;

use super::{BackendSettings, Checkpoint, CheckpointState, EncoderBackend, Example, TrainingError};
use crate::preprocessing::RenderedInput;
use crate::rng;

const FNV_OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
const FNV_PRIME: u64 = 0x0000_0100_0000_01b3;

fn fnv1a(parts: &[&[u8]]) -> u64 {
    let mut h = FNV_OFFSET;
    for part in parts {
        for &b in *part {
            h ^= b as u64;
            h = h.wrapping_mul(FNV_PRIME);
        }
        h ^= 0xff;
        h = h.wrapping_mul(FNV_PRIME);
    }
    h
}

#[derive(Debug, Clone)]
pub struct HashedLinearBackend {
    pub buckets: usize,
    /// Peak step size. Linear models need far larger steps than the encoder
    /// default, so the configured encoder rate is not used here.
    pub learning_rate: f64,
    settings: Option<BackendSettings>,
    /// Row-major `num_labels × buckets`, followed by one bias per label.
    params: Vec<f64>,
    rng: ChaCha8Rng,
    step: usize,
}

impl Default for HashedLinearBackend {
    fn default() -> Self {
        Self::new(1 << 14, 0.5)
    }
}

impl HashedLinearBackend {
    pub const ID: &'static str = "hashed-linear";

    pub fn new(buckets: usize, learning_rate: f64) -> Self {
        HashedLinearBackend {
            buckets: buckets.max(1),
            learning_rate,
            settings: None,
            params: Vec::new(),
            rng: rng::seeded(0),
            step: 0,
        }
    }

    fn settings(&self) -> Result<&BackendSettings, TrainingError> {
        self.settings
            .as_ref()
            .ok_or_else(|| TrainingError::BackendFailure("backend used before initialize".into()))
    }

    /// Tokens of the rendered sequence, truncated from the end to the
    /// length budget. Registered special tokens stay atomic.
    pub fn tokens(&self, input: &RenderedInput) -> Vec<(usize, String)> {
        let (specials, budget) = match &self.settings {
            Some(s) => (s.added_special_tokens.as_slice(), s.max_input_length),
            None => (&[][..], usize::MAX),
        };
        let mut out = Vec::new();
        for (seg, text) in input.segments.iter().enumerate() {
            for raw in text.split_whitespace() {
                let tok = if specials.iter().any(|s| s == raw) {
                    raw.to_string()
                } else {
                    let t: String = raw
                        .trim_matches(|c: char| !c.is_alphanumeric())
                        .to_lowercase();
                    if t.is_empty() {
                        continue;
                    }
                    t
                };
                out.push((seg, tok));
            }
        }
        out.truncate(budget);
        out
    }

    /// Sparse feature vector: hashed unigrams and bigrams, L2-normalised.
    fn features(&self, input: &RenderedInput) -> Vec<(usize, f64)> {
        let toks = self.tokens(input);
        let mut idx: Vec<usize> = Vec::with_capacity(toks.len() * 2);
        for (i, (seg, tok)) in toks.iter().enumerate() {
            let seg = [*seg as u8];
            idx.push((fnv1a(&[&seg, tok.as_bytes()]) % self.buckets as u64) as usize);
            if let Some((pseg, prev)) = i.checked_sub(1).map(|j| &toks[j]) {
                if *pseg == seg[0] as usize {
                    idx.push((fnv1a(&[&seg, prev.as_bytes(), tok.as_bytes()]) % self.buckets as u64) as usize);
                }
            }
        }
        idx.sort_unstable();
        let mut feats: Vec<(usize, f64)> = Vec::new();
        for i in idx {
            match feats.last_mut() {
                Some((j, v)) if *j == i => *v += 1.0,
                _ => feats.push((i, 1.0)),
            }
        }
        let norm = feats.iter().map(|(_, v)| v * v).sum::<f64>().sqrt();
        if norm > 0.0 {
            for (_, v) in &mut feats {
                *v /= norm;
            }
        }
        feats
    }

    fn probabilities(&self, feats: &[(usize, f64)], k: usize) -> Vec<f64> {
        let bias = k * self.buckets;
        let logits: Vec<f64> = (0..k)
            .map(|c| {
                let row = &self.params[c * self.buckets..(c + 1) * self.buckets];
                self.params[bias + c] + feats.iter().map(|&(i, v)| row[i] * v).sum::<f64>()
            })
            .collect();
        let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
        let z: f64 = exps.iter().sum();
        exps.into_iter().map(|e| e / z).collect()
    }

    fn lr_at(&self, step: usize) -> f64 {
        let s = match &self.settings {
            Some(s) => s,
            None => return 0.0,
        };
        let total = s.total_steps.max(1);
        let warm = (s.warmup_ratio * total as f64).ceil() as usize;
        if step < warm {
            self.learning_rate * (step + 1) as f64 / warm as f64
        } else {
            self.learning_rate * (total.saturating_sub(step) as f64 / (total - warm).max(1) as f64).max(0.0)
        }
    }
}

impl EncoderBackend for HashedLinearBackend {
    fn id(&self) -> String {
        Self::ID.into()
    }

    fn initialize(&mut self, settings: &BackendSettings) -> Result<(), TrainingError> {
        if settings.num_labels == 0 {
            return Err(TrainingError::BackendFailure("num_labels must be positive".into()));
        }
        self.params = vec![0.0; settings.num_labels * (self.buckets + 1)];
        self.rng = rng::seeded(settings.seed);
        self.step = 0;
        self.settings = Some(settings.clone());
        Ok(())
    }

    fn train_epoch(&mut self, batches: &[Vec<&Example>], class_weights: &[f64]) -> Result<f64, TrainingError> {
        let s = self.settings()?.clone();
        let k = s.num_labels;
        if class_weights.len() != k {
            return Err(TrainingError::BackendFailure(format!("expected {k} class weights, got {}", class_weights.len())));
        }
        let keep = 1.0 - s.dropout;
        let mut loss_sum = 0.0;
        let mut seen = 0usize;
        for batch in batches {
            if batch.is_empty() {
                continue;
            }
            let lr = self.lr_at(self.step);
            let mut grad: Vec<(usize, f64)> = Vec::new();
            let mut bias_grad = vec![0.0; k];
            for ex in batch {
                if ex.label >= k {
                    return Err(TrainingError::BackendFailure(format!("label index {} out of range", ex.label)));
                }
                let mut feats = self.features(&ex.input);
                if s.dropout > 0.0 {
                    feats.retain(|_| rng::unit_f64(&mut self.rng) < keep);
                    for (_, v) in &mut feats {
                        *v /= keep;
                    }
                }
                let probs = self.probabilities(&feats, k);
                let w = class_weights[ex.label];
                loss_sum += super::weighted_ce(probs[ex.label].max(f64::MIN_POSITIVE), w)?;
                seen += 1;
                let scale = w / batch.len() as f64;
                for (c, p) in probs.iter().enumerate() {
                    let d = scale * (p - if c == ex.label { 1.0 } else { 0.0 });
                    bias_grad[c] += d;
                    for &(i, v) in &feats {
                        grad.push((c * self.buckets + i, d * v));
                    }
                }
            }
            let decay = 1.0 - lr * s.weight_decay;
            let bias = k * self.buckets;
            for p in &mut self.params[..bias] {
                *p *= decay;
            }
            for (i, g) in grad {
                self.params[i] -= lr * g;
            }
            for (c, g) in bias_grad.into_iter().enumerate() {
                self.params[bias + c] -= lr * g;
            }
            self.step += 1;
        }
        Ok(if seen == 0 { 0.0 } else { loss_sum / seen as f64 })
    }

    fn predict(&mut self, inputs: &[&RenderedInput]) -> Result<Vec<Vec<f64>>, TrainingError> {
        let k = self.settings()?.num_labels;
        Ok(inputs.iter().map(|i| self.probabilities(&self.features(i), k)).collect())
    }

    fn snapshot(&mut self, epoch: usize) -> Result<Checkpoint, TrainingError> {
        self.settings()?;
        Ok(Checkpoint {
            backend: self.id(),
            epoch,
            state: CheckpointState::InMemory {
                parameters: self.params.clone(),
            },
        })
    }

    fn restore(&mut self, checkpoint: &Checkpoint) -> Result<(), TrainingError> {
        let k = self.settings()?.num_labels;
        match &checkpoint.state {
            CheckpointState::InMemory { parameters } if parameters.len() == k * (self.buckets + 1) => {
                self.params = parameters.clone();
                Ok(())
            }
            CheckpointState::InMemory { parameters } => Err(TrainingError::BackendFailure(format!(
                "checkpoint has {} parameters, model expects {}",
                parameters.len(),
                k * (self.buckets + 1)
            ))),
            CheckpointState::OnDisk { path } => Err(TrainingError::BackendFailure(format!(
                "{} cannot load on-disk checkpoint {}",
                Self::ID,
                path.display()
            ))),
        }
    }
}
