//! Knowledge embeddings: the object text becomes token rows `T_o`, the
//! three affordance texts become pooled rows `T_a`, and the two sets are
//! correlated by cross-attention followed by self-attention.

use crate::autograd::{ParamStore, Tape, Var};
use crate::backbones::TextEncoder;
use crate::error::{Error, Result};
use crate::mhacot::KnowledgeRecord;
use crate::nn::{Attention, Init};

/// Cap on object-text tokens.
pub const MAX_OBJECT_TOKENS: usize = 64;

/// Token ids of one record, ready for encoding.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct KnowledgeTokens {
    pub object: Vec<u32>,
    pub affordances: [Vec<u32>; 3],
}

impl KnowledgeTokens {
    pub fn from_record(record: &KnowledgeRecord, encoder: &TextEncoder, cap: usize) -> Result<Self> {
        let mut object = encoder.token_ids(&record.object_text)?;
        object.truncate(cap.max(1));
        let [a, b, c] = &record.affordance_texts;
        Ok(Self {
            object,
            affordances: [encoder.token_ids(a)?, encoder.token_ids(b)?, encoder.token_ids(c)?],
        })
    }
}

/// `(T_o [N_o × C], T_a [3 × C])`.
pub fn encode_knowledge<'a>(
    tape: &mut Tape<'a>,
    store: &'a ParamStore,
    encoder: &TextEncoder,
    tokens: &KnowledgeTokens,
) -> Result<(Var, Var)> {
    let t_o = encoder.forward_ids(tape, store, &tokens.object)?;
    let mut pooled = Vec::with_capacity(3);
    for ids in &tokens.affordances {
        let rows = encoder.forward_ids(tape, store, ids)?;
        pooled.push(tape.mean_rows(rows));
    }
    let t_a = tape.concat_rows(&pooled);
    Ok((t_o, t_a))
}

/// Integrated knowledge with the attention maps kept for inspection.
#[derive(Clone, Copy, Debug)]
pub struct Integrated {
    pub t_o: Var,
    pub t_a: Var,
    /// Cross-attention weights, `[N_o × N_a]` and `[N_a × N_o]`.
    pub cross_o: Var,
    pub cross_a: Var,
    /// Self-attention weights, `[N_o × N_o]` and `[N_a × N_a]`.
    pub self_o: Var,
    pub self_a: Var,
}

/// `f_m` (cross-attention) and `f_δ` (self-attention), shared by both branches.
#[derive(Clone, Debug)]
pub struct KnowledgeIntegrator {
    pub cross: Attention,
    pub refine: Attention,
}

impl KnowledgeIntegrator {
    pub fn new(store: &mut ParamStore, init: &mut Init, channels: usize) -> Self {
        Self {
            cross: Attention::new(store, init, "knowledge.cross", channels),
            refine: Attention::new(store, init, "knowledge.self", channels),
        }
    }

    /// `T̄_o = f_δ(f_m(T_o, T_a))`, `T̄_a = f_δ(f_m(T_a, T_o))`.
    pub fn integrate<'a>(&self, tape: &mut Tape<'a>, store: &'a ParamStore, t_o: Var, t_a: Var) -> Result<Integrated> {
        let c = self.cross.dim;
        for (name, v) in [("T_o", t_o), ("T_a", t_a)] {
            let (rows, cols) = tape.shape(v);
            if cols != c || rows == 0 {
                return Err(Error::Shape(format!("{name} is {rows}x{cols}, expected [L × {c}]")));
            }
        }
        let (m_o, cross_o) = self.cross.forward_with_weights(tape, store, t_o, t_a);
        let (m_a, cross_a) = self.cross.forward_with_weights(tape, store, t_a, t_o);
        let (out_o, self_o) = self.refine.forward_with_weights(tape, store, m_o, m_o);
        let (out_a, self_a) = self.refine.forward_with_weights(tape, store, m_a, m_a);
        Ok(Integrated {
            t_o: out_o,
            t_a: out_a,
            cross_o,
            cross_a,
            self_o,
            self_a,
        })
    }
}
