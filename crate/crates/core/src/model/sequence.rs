//! Chat-template rendering of a conversation around a single code slot.
//!
//! Layout: `BOS`, then per turn `HUMAN [CODE_SLOT] question ASSISTANT
//! answer EOS`, with the slot only in the first rendered turn. The loss mask
//! covers answer tokens and their `EOS`; everything else is context.

use std::ops::Range;

use crate::data::ConversationSample;
use crate::error::ModelError;
use crate::tokenizer::{SpecialIds, TokenizerModel};

/// One expanded decoder position.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Column {
    Text(u32),
    /// Index into the sample's code tokens.
    Code(usize),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MultimodalSequence {
    /// Rendered text tokens containing exactly one `CODE_SLOT`.
    pub ids: Vec<u32>,
    /// Parallel to `ids`; true on answer tokens and their `EOS`.
    pub loss_mask: Vec<bool>,
    /// Ranges of `ids` covered by each answer (plus `EOS`).
    pub answer_spans: Vec<Range<usize>>,
    /// Code tokens after truncation; they replace the slot when embedded.
    pub code_ids: Vec<u32>,
    pub slot: usize,
    /// Oldest turns removed to fit the context.
    pub dropped_turns: usize,
}

impl MultimodalSequence {
    pub fn code_len(&self) -> usize {
        self.code_ids.len()
    }

    pub fn text_len(&self) -> usize {
        self.ids.len() - 1
    }

    /// `T₁ + T₂`: the number of decoder positions.
    pub fn expanded_len(&self) -> usize {
        self.code_len() + self.text_len()
    }

    pub fn masked_count(&self) -> usize {
        self.loss_mask.iter().filter(|&&m| m).count()
    }

    pub fn columns(&self) -> Vec<Column> {
        let mut out = Vec::with_capacity(self.expanded_len());
        for (i, &id) in self.ids.iter().enumerate() {
            if i == self.slot {
                out.extend((0..self.code_len()).map(Column::Code));
            } else {
                out.push(Column::Text(id));
            }
        }
        out
    }

    /// Next-token target for every decoder position. Only positions whose
    /// successor is a masked text token carry one, so code columns never
    /// serve as targets.
    pub fn targets(&self) -> Vec<Option<u32>> {
        let mut next_masked = Vec::with_capacity(self.expanded_len());
        for (i, &id) in self.ids.iter().enumerate() {
            if i == self.slot {
                next_masked.extend(std::iter::repeat_n(None, self.code_len()));
            } else {
                next_masked.push(self.loss_mask[i].then_some(id));
            }
        }
        let mut out: Vec<Option<u32>> = next_masked.iter().skip(1).copied().collect();
        out.push(None);
        out
    }
}

/// Tokenizes code and keeps at most `max_code_tokens` leading tokens.
pub fn tokenize_code(tok: &TokenizerModel, code: &str, max_code_tokens: usize) -> Result<Vec<u32>, ModelError> {
    if max_code_tokens == 0 {
        return Err(ModelError::Config("max_code_tokens must be positive".into()));
    }
    let mut ids = tok.encode(code);
    if ids.is_empty() {
        return Err(ModelError::Input("empty code".into()));
    }
    ids.truncate(max_code_tokens);
    Ok(ids)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RenderOptions {
    pub turn_limit: Option<usize>,
    pub max_code_tokens: usize,
    pub context: usize,
}

struct RenderedTurn {
    question: Vec<u32>,
    answer: Vec<u32>,
}

fn assemble(sp: SpecialIds, turns: &[RenderedTurn], code_ids: Vec<u32>, dropped: usize) -> MultimodalSequence {
    let mut ids = vec![sp.bos];
    let mut mask = vec![false];
    let mut spans = Vec::with_capacity(turns.len());
    let mut slot = usize::MAX;
    for (i, t) in turns.iter().enumerate() {
        ids.push(sp.human);
        mask.push(false);
        if i == 0 {
            slot = ids.len();
            ids.push(sp.code_slot);
            mask.push(false);
        }
        ids.extend(&t.question);
        mask.extend(std::iter::repeat_n(false, t.question.len()));
        ids.push(sp.assistant);
        mask.push(false);
        let start = ids.len();
        ids.extend(&t.answer);
        ids.push(sp.eos);
        mask.extend(std::iter::repeat_n(true, t.answer.len() + 1));
        spans.push(start..ids.len());
    }
    MultimodalSequence { ids, loss_mask: mask, answer_spans: spans, code_ids, slot, dropped_turns: dropped }
}

/// Renders a conversation for training.
///
/// If the sequence exceeds `context`, the oldest turns are dropped; the code
/// block and the final turn are never removed.
pub fn render_conversation(
    tok: &TokenizerModel,
    sample: &ConversationSample,
    opts: RenderOptions,
) -> Result<MultimodalSequence, ModelError> {
    let limit = opts.turn_limit.unwrap_or(usize::MAX).min(sample.turns.len());
    if limit == 0 {
        return Err(ModelError::Input(format!("sample {} has no turns to render", sample.id)));
    }
    let code_ids = tokenize_code(tok, &sample.code, opts.max_code_tokens)?;
    let turns: Vec<RenderedTurn> = sample.turns[..limit]
        .iter()
        .map(|t| RenderedTurn { question: tok.encode(&t.q), answer: tok.encode(&t.a) })
        .collect();
    let mut first = 0;
    loop {
        let seq = assemble(tok.specials(), &turns[first..], code_ids.clone(), first);
        if seq.ids.iter().filter(|&&id| id == tok.specials().code_slot).count() != 1 {
            return Err(ModelError::Internal("rendered sequence lacks a single CODE_SLOT".into()));
        }
        let needed = seq.expanded_len();
        if needed <= opts.context {
            return Ok(seq);
        }
        if first + 1 == turns.len() {
            return Err(ModelError::ContextOverflow { needed, limit: opts.context });
        }
        first += 1;
    }
}

/// Prompt for generation: the template up to and including `ASSISTANT`.
pub fn render_prompt(
    tok: &TokenizerModel,
    code: &str,
    question: &str,
    max_code_tokens: usize,
) -> Result<MultimodalSequence, ModelError> {
    let sp = tok.specials();
    let code_ids = tokenize_code(tok, code, max_code_tokens)?;
    let mut ids = vec![sp.bos, sp.human, sp.code_slot];
    ids.extend(tok.encode(question));
    ids.push(sp.assistant);
    let n = ids.len();
    Ok(MultimodalSequence {
        ids,
        loss_mask: vec![false; n],
        answer_spans: Vec::new(),
        code_ids,
        slot: 2,
        dropped_turns: 0,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::Turn;

    fn tok() -> TokenizerModel {
        TokenizerModel::train(&["the quick brown fox jumps over the lazy dog", "int main() { return 0; }"], 300).unwrap()
    }

    fn sample(turns: usize) -> ConversationSample {
        ConversationSample {
            id: "s".into(),
            language: "C".into(),
            code: "int main() { return 0; }".into(),
            description: None,
            turns: (0..turns).map(|i| Turn::new(format!("question {i}?"), format!("answer {i}."))).collect(),
            split: None,
        }
    }

    fn opts() -> RenderOptions {
        RenderOptions { turn_limit: None, max_code_tokens: 1000, context: 512 }
    }

    #[test]
    fn single_turn_layout() {
        let t = tok();
        let sp = t.specials();
        let seq = render_conversation(&t, &sample(1), opts()).unwrap();
        assert_eq!(&seq.ids[..3], &[sp.bos, sp.human, sp.code_slot]);
        assert_eq!(*seq.ids.last().unwrap(), sp.eos);
        assert_eq!(seq.ids.iter().filter(|&&i| i == sp.code_slot).count(), 1);
        assert_eq!(seq.masked_count(), t.encode("answer 0.").len() + 1);
        let a = seq.ids.iter().position(|&i| i == sp.assistant).unwrap();
        assert!(seq.loss_mask[..=a].iter().all(|&m| !m));
    }

    #[test]
    fn targets_skip_code_and_prompt() {
        let t = tok();
        let seq = render_conversation(&t, &sample(2), opts()).unwrap();
        let cols = seq.columns();
        let targets = seq.targets();
        assert_eq!(cols.len(), seq.expanded_len());
        assert_eq!(targets.len(), seq.expanded_len());
        assert_eq!(targets.iter().flatten().count(), seq.masked_count());
        for (p, tgt) in targets.iter().enumerate() {
            if let Some(id) = tgt {
                assert_eq!(cols[p + 1], Column::Text(*id));
            }
        }
    }

    #[test]
    fn later_turns_do_not_repeat_the_slot() {
        let t = tok();
        let seq = render_conversation(&t, &sample(3), opts()).unwrap();
        assert_eq!(seq.answer_spans.len(), 3);
        assert_eq!(seq.ids.iter().filter(|&&i| i == t.specials().human).count(), 3);
        assert_eq!(seq.ids.iter().filter(|&&i| i == t.specials().code_slot).count(), 1);
    }

    #[test]
    fn overflow_drops_oldest_turns_first() {
        let t = tok();
        let full = render_conversation(&t, &sample(4), opts()).unwrap();
        let last_two = render_conversation(
            &t,
            &ConversationSample { turns: sample(4).turns[2..].to_vec(), ..sample(4) },
            opts(),
        )
        .unwrap();
        let tight = RenderOptions { context: last_two.expanded_len(), ..opts() };
        let seq = render_conversation(&t, &sample(4), tight).unwrap();
        assert!(full.expanded_len() > tight.context);
        assert_eq!(seq.dropped_turns, 2);
        assert_eq!(seq.ids, last_two.ids);
        assert_eq!(seq.code_ids, full.code_ids);

        let too_small = RenderOptions { context: 8, ..opts() };
        assert!(matches!(
            render_conversation(&t, &sample(4), too_small),
            Err(ModelError::ContextOverflow { .. })
        ));
    }

    #[test]
    fn code_truncation_and_empty_code() {
        let t = tok();
        let seq = render_conversation(&t, &sample(1), RenderOptions { max_code_tokens: 3, ..opts() }).unwrap();
        assert_eq!(seq.code_len(), 3);
        let empty = ConversationSample { code: String::new(), ..sample(1) };
        assert!(matches!(render_conversation(&t, &empty, opts()), Err(ModelError::Input(_))));
        let blank = ConversationSample { code: "  ".into(), ..sample(1) };
        assert!(render_conversation(&t, &blank, opts()).is_ok());
    }
}
