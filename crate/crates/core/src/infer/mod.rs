//! Beam-search generation and closed-ended ranking by per-token
//! log-likelihood.

use std::cmp::Ordering;

use crate::experts::ExpertLabelMap;
use crate::model::{ModelError, Prismer, Result, Session};
use crate::tensor::{Graph, Tensor, Var};
use crate::vocab::{Vocab, BOS, EOS};

/// Prompt prepended to every caption.
pub const CAPTION_PROMPT: &str = "a picture of";

/// Encodes one image (and its expert maps) into `z`.
pub fn encode(model: &Prismer, rgb: &Tensor, experts: &[ExpertLabelMap]) -> Result<Tensor> {
    let mut g = Graph::new();
    let mut s = Session::inference(model, &mut g);
    let z = s.encoder_forward(rgb, experts)?;
    Ok(g.value(z).clone())
}

pub fn log_softmax(row: &[f64]) -> Vec<f64> {
    let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = mx + row.iter().map(|v| (v - mx).exp()).sum::<f64>().ln();
    row.iter().map(|v| v - lse).collect()
}

/// Decoder bound to one `z`, reusing parameter leaves across calls.
pub struct Scorer<'m> {
    model: &'m Prismer,
    graph: Graph,
    bound: Vec<(crate::model::ParamId, Var)>,
    z: Var,
}

impl<'m> Scorer<'m> {
    pub fn new(model: &'m Prismer, z: &Tensor) -> Self {
        let mut graph = Graph::new();
        let z = graph.constant(z.clone());
        Self {
            model,
            graph,
            bound: Vec::new(),
            z,
        }
    }

    /// Log-probabilities for every position of `tokens`: row `t` is the
    /// distribution of token `t + 1`.
    pub fn log_probs(&mut self, tokens: &[usize]) -> Result<Vec<Vec<f64>>> {
        // Keep the graph from growing without bound over long searches.
        if self.graph.len() > 200_000 {
            let z = self.graph.value(self.z).clone();
            *self = Self::new(self.model, &z);
        }
        let mut s = Session::inference(self.model, &mut self.graph);
        for &(id, v) in &self.bound {
            s.bind(id, v);
        }
        let logits = s.decoder_forward(self.z, tokens)?;
        let bound: Vec<_> = s.bound_params().collect();
        self.bound = bound;
        let value = self.graph.value(logits);
        Ok((0..tokens.len())
            .map(|t| log_softmax(value.row(t)))
            .collect())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Generation {
    /// Generated tokens after the prompt, ending with EOS unless truncated.
    pub tokens: Vec<usize>,
    /// Sum of token log-probabilities.
    pub score: f64,
    /// `score / tokens.len()`.
    pub normalized: f64,
    /// No hypothesis reached EOS within `max_len`.
    pub truncated: bool,
}

#[derive(Clone, Debug)]
struct Hyp {
    tokens: Vec<usize>,
    score: f64,
}

fn by_score(a: &Hyp, b: &Hyp) -> Ordering {
    b.score
        .total_cmp(&a.score)
        .then_with(|| a.tokens.cmp(&b.tokens))
}

fn normalized(h: &Hyp) -> f64 {
    h.score / h.tokens.len() as f64
}

fn by_normalized(a: &Hyp, b: &Hyp) -> Ordering {
    normalized(b)
        .total_cmp(&normalized(a))
        .then_with(|| a.tokens.cmp(&b.tokens))
}

/// Beam search after `BOS prompt`. Every step keeps the `beam` best
/// expansions by raw score; those ending in EOS are set aside as complete.
/// The result is the complete hypothesis with the best length-normalized
/// score, ties going to the lexicographically smaller sequence.
pub fn generate(
    model: &Prismer,
    z: &Tensor,
    prompt: &[usize],
    beam: usize,
    max_len: usize,
) -> Result<Generation> {
    if beam == 0 || max_len == 0 {
        return Err(ModelError::Contract(
            "beam width and max length must be at least 1".into(),
        ));
    }
    let mut scorer = Scorer::new(model, z);
    let mut head = vec![BOS];
    head.extend_from_slice(prompt);
    let mut live = vec![Hyp {
        tokens: Vec::new(),
        score: 0.0,
    }];
    let mut done: Vec<Hyp> = Vec::new();
    for _ in 0..max_len {
        let mut expansions = Vec::with_capacity(live.len() * model.config.vocab_size);
        for h in &live {
            let mut seq = head.clone();
            seq.extend_from_slice(&h.tokens);
            let rows = scorer.log_probs(&seq)?;
            for (tok, lp) in rows[seq.len() - 1].iter().enumerate() {
                let mut tokens = h.tokens.clone();
                tokens.push(tok);
                expansions.push(Hyp {
                    tokens,
                    score: h.score + lp,
                });
            }
        }
        expansions.sort_by(by_score);
        expansions.truncate(beam);
        live.clear();
        for h in expansions {
            if h.tokens.last() == Some(&EOS) {
                done.push(h);
            } else {
                live.push(h);
            }
        }
        if live.is_empty() {
            break;
        }
    }
    let truncated = done.is_empty();
    let pool = if truncated { &mut live } else { &mut done };
    pool.sort_by(by_normalized);
    let best = pool.swap_remove(0);
    Ok(Generation {
        normalized: normalized(&best),
        score: best.score,
        tokens: best.tokens,
        truncated,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct Ranking {
    pub index: usize,
    pub scores: Vec<f64>,
}

/// Mean log-likelihood of `candidate` continuing `prefix`.
pub fn candidate_score(scorer: &mut Scorer, prefix: &[usize], candidate: &[usize]) -> Result<f64> {
    if candidate.is_empty() {
        return Err(ModelError::Contract("empty answer candidate".into()));
    }
    if prefix.is_empty() {
        return Err(ModelError::Contract(
            "ranking needs a non-empty prefix".into(),
        ));
    }
    let mut seq = prefix.to_vec();
    seq.extend_from_slice(candidate);
    let rows = scorer.log_probs(&seq)?;
    let p = prefix.len();
    let total: f64 = candidate
        .iter()
        .enumerate()
        .map(|(j, &tok)| rows[p + j - 1][tok])
        .sum();
    Ok(total / candidate.len() as f64)
}

/// Scores every candidate independently and returns the best; ties go to
/// the lowest index.
pub fn rank_closed_ended(
    model: &Prismer,
    z: &Tensor,
    prefix: &[usize],
    answers: &[Vec<usize>],
) -> Result<Ranking> {
    if answers.is_empty() {
        return Err(ModelError::Contract("empty answer list".into()));
    }
    let mut scorer = Scorer::new(model, z);
    let scores = answers
        .iter()
        .map(|a| candidate_score(&mut scorer, prefix, a))
        .collect::<Result<Vec<f64>>>()?;
    let mut index = 0;
    for (i, s) in scores.iter().enumerate() {
        if *s > scores[index] {
            index = i;
        }
    }
    Ok(Ranking { index, scores })
}

#[derive(Clone, Debug, PartialEq)]
pub struct Caption {
    /// Generated tokens without the prompt and without EOS.
    pub tokens: Vec<usize>,
    pub text: String,
    pub truncated: bool,
}

/// Captions an image behind the fixed prompt.
pub fn caption(
    model: &Prismer,
    rgb: &Tensor,
    experts: &[ExpertLabelMap],
    beam: usize,
    max_len: usize,
) -> Result<Caption> {
    let vocab = Vocab::get();
    let prompt = vocab.encode(CAPTION_PROMPT).map_err(ModelError::Contract)?;
    let z = encode(model, rgb, experts)?;
    let g = generate(model, &z, &prompt, beam, max_len)?;
    let tokens: Vec<usize> = g.tokens.into_iter().filter(|&t| t != EOS).collect();
    Ok(Caption {
        text: vocab.decode(&tokens),
        tokens,
        truncated: g.truncated,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn log_softmax_normalizes() {
        let l = log_softmax(&[1.0, 2.0, 3.0]);
        let total: f64 = l.iter().map(|v| v.exp()).sum();
        assert!((total - 1.0).abs() < 1e-12);
    }

    #[test]
    fn ordering_breaks_ties_lexicographically() {
        let a = Hyp {
            tokens: vec![1, 2],
            score: -1.0,
        };
        let b = Hyp {
            tokens: vec![1, 3],
            score: -1.0,
        };
        assert_eq!(by_score(&a, &b), Ordering::Less);
        assert_eq!(by_normalized(&b, &a), Ordering::Greater);
    }
}
