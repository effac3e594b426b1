//! Vocabulary, token sequences, and the deterministic token-level generation
//! MDP: states are generated prefixes, actions are vocabulary tokens, and an
//! episode ends when EOS is emitted or the horizon is reached.

use crate::{Error, Result};

/// Dense token id in `0..V`.
pub type TokenId = u32;

/// Reserved id ranges for the fact grammar (entity / attribute / value).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct FactRanges {
    pub entities: (TokenId, TokenId),
    pub attributes: (TokenId, TokenId),
    pub values: (TokenId, TokenId),
}

impl FactRanges {
    pub fn is_entity(&self, id: TokenId) -> bool {
        id >= self.entities.0 && id < self.entities.1
    }
    pub fn is_attribute(&self, id: TokenId) -> bool {
        id >= self.attributes.0 && id < self.attributes.1
    }
    pub fn is_value(&self, id: TokenId) -> bool {
        id >= self.values.0 && id < self.values.1
    }
    pub fn n_entities(&self) -> u32 {
        self.entities.1 - self.entities.0
    }
    pub fn n_attributes(&self) -> u32 {
        self.attributes.1 - self.attributes.0
    }
    pub fn n_values(&self) -> u32 {
        self.values.1 - self.values.0
    }
}

/// Closed token set with reserved ids. Ids are dense integers `0..V`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocabulary {
    size: u32,
    eos_id: TokenId,
    separator_id: Option<TokenId>,
    ctrl_entailed_id: Option<TokenId>,
    ctrl_not_entailed_id: Option<TokenId>,
    boundary_id: Option<TokenId>,
    fact_ranges: Option<FactRanges>,
}

impl Vocabulary {
    /// Minimal vocabulary: EOS plus `size - 1` content tokens. Used by small
    /// enumeration oracles and tests; the fact-world builder below is the
    /// full-featured constructor.
    pub fn plain(size: u32, eos_id: TokenId) -> Result<Self> {
        if size < 2 {
            return Err(Error::Config(format!(
                "vocabulary needs at least 2 tokens, got {size}"
            )));
        }
        if eos_id >= size {
            return Err(Error::Config(format!(
                "eos_id {eos_id} out of range for vocabulary of size {size}"
            )));
        }
        Ok(Self {
            size,
            eos_id,
            separator_id: None,
            ctrl_entailed_id: None,
            ctrl_not_entailed_id: None,
            boundary_id: None,
            fact_ranges: None,
        })
    }

    /// Fact-world vocabulary layout: `[eos, sep, ctrl_entailed,
    /// ctrl_not_entailed, boundary, entities.., attributes.., values..]`.
    /// The boundary token never occurs in documents or references; it marks
    /// the context/prefix seam for the windowed networks.
    pub fn fact_world(n_entities: u32, n_attributes: u32, n_values: u32) -> Result<Self> {
        if n_entities == 0 || n_attributes == 0 || n_values == 0 {
            return Err(Error::Config(
                "fact ranges must all be non-empty".to_string(),
            ));
        }
        let eos_id = 0;
        let separator_id = 1;
        let ctrl_entailed_id = 2;
        let ctrl_not_entailed_id = 3;
        let boundary_id = 4;
        let e0 = 5;
        let a0 = e0 + n_entities;
        let v0 = a0 + n_attributes;
        let size = v0 + n_values;
        debug_assert!(size >= 4);
        Ok(Self {
            size,
            eos_id,
            separator_id: Some(separator_id),
            ctrl_entailed_id: Some(ctrl_entailed_id),
            ctrl_not_entailed_id: Some(ctrl_not_entailed_id),
            boundary_id: Some(boundary_id),
            fact_ranges: Some(FactRanges {
                entities: (e0, a0),
                attributes: (a0, v0),
                values: (v0, size),
            }),
        })
    }

    pub fn size(&self) -> u32 {
        self.size
    }
    pub fn eos_id(&self) -> TokenId {
        self.eos_id
    }
    pub fn separator_id(&self) -> Option<TokenId> {
        self.separator_id
    }
    pub fn ctrl_entailed_id(&self) -> Option<TokenId> {
        self.ctrl_entailed_id
    }
    pub fn ctrl_not_entailed_id(&self) -> Option<TokenId> {
        self.ctrl_not_entailed_id
    }
    pub fn boundary_id(&self) -> Option<TokenId> {
        self.boundary_id
    }
    pub fn fact_ranges(&self) -> Option<&FactRanges> {
        self.fact_ranges.as_ref()
    }

    pub fn contains(&self, id: TokenId) -> bool {
        id < self.size
    }
}

/// Role marker for a token sequence.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Role {
    /// Input document (plus optional control token); never contains EOS.
    Context,
    /// Partially generated summary; never contains EOS.
    Prefix,
    /// Finished summary: EOS exactly once at the end, or truncated at the horizon.
    Complete,
}

/// A token sequence with a role invariant checked at construction.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TokenSeq {
    ids: Vec<TokenId>,
    role: Role,
}

impl TokenSeq {
    pub fn context(ids: Vec<TokenId>, eos_id: TokenId) -> Result<Self> {
        if ids.contains(&eos_id) {
            return Err(Error::Contract("context must not contain EOS".to_string()));
        }
        Ok(Self {
            ids,
            role: Role::Context,
        })
    }

    pub fn prefix(ids: Vec<TokenId>, eos_id: TokenId) -> Result<Self> {
        if ids.contains(&eos_id) {
            return Err(Error::Contract("prefix must not contain EOS".to_string()));
        }
        Ok(Self {
            ids,
            role: Role::Prefix,
        })
    }

    pub fn empty_prefix() -> Self {
        Self {
            ids: Vec::new(),
            role: Role::Prefix,
        }
    }

    pub fn complete(ids: Vec<TokenId>, eos_id: TokenId, horizon: usize) -> Result<Self> {
        let n_eos = ids.iter().filter(|&&t| t == eos_id).count();
        let eos_final = n_eos == 1 && ids.last() == Some(&eos_id);
        let truncated = n_eos == 0 && ids.len() == horizon;
        if !(eos_final || truncated) {
            return Err(Error::Contract(
                "complete sequence must end with a single EOS or be truncated at the horizon"
                    .to_string(),
            ));
        }
        Ok(Self {
            ids,
            role: Role::Complete,
        })
    }

    pub fn ids(&self) -> &[TokenId] {
        &self.ids
    }
    pub fn role(&self) -> Role {
        self.role
    }
    pub fn len(&self) -> usize {
        self.ids.len()
    }
    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    /// Token ids with a trailing EOS (if any) removed. Metrics and the
    /// entailment oracle operate on this view.
    pub fn without_eos(&self, eos_id: TokenId) -> &[TokenId] {
        match self.ids.last() {
            Some(&t) if t == eos_id => &self.ids[..self.ids.len() - 1],
            _ => &self.ids,
        }
    }
}

/// Horizon and context-length limits of the generation MDP.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct MdpLimits {
    /// Maximum number of generated tokens (the horizon).
    pub horizon: usize,
    /// Maximum context length.
    pub context_max: usize,
}

impl MdpLimits {
    pub fn new(horizon: usize, context_max: usize) -> Result<Self> {
        if horizon == 0 || context_max == 0 {
            return Err(Error::Config(
                "horizon and context_max must be >= 1".to_string(),
            ));
        }
        Ok(Self {
            horizon,
            context_max,
        })
    }
}

/// One rollout: context, taken actions, and per-token statistics.
#[derive(Debug, Clone)]
pub struct Episode {
    pub context: TokenSeq,
    pub actions: Vec<TokenId>,
    /// Log-probability (nats) of each taken action under the rollout policy.
    pub logprobs: Vec<f64>,
    /// Value estimate at each pre-action state.
    pub values: Vec<f64>,
    pub rewards: Vec<f64>,
    pub truncated: bool,
}

impl Episode {
    pub fn new(
        context: TokenSeq,
        actions: Vec<TokenId>,
        logprobs: Vec<f64>,
        values: Vec<f64>,
        eos_id: TokenId,
        limits: &MdpLimits,
    ) -> Result<Self> {
        let n = actions.len();
        if logprobs.len() != n || values.len() != n {
            return Err(Error::Contract(
                "episode field lengths must match".to_string(),
            ));
        }
        if logprobs.iter().any(|&lp| lp > 0.0 || !lp.is_finite()) {
            return Err(Error::Contract(
                "episode logprobs must be finite and <= 0".to_string(),
            ));
        }
        let has_eos = actions.contains(&eos_id);
        let truncated = !has_eos && n == limits.horizon;
        if !has_eos && !truncated {
            return Err(Error::Contract(
                "episode must end with EOS or be truncated at the horizon".to_string(),
            ));
        }
        Ok(Self {
            context,
            actions,
            logprobs,
            values,
            rewards: vec![0.0; n],
            truncated,
        })
    }

    pub fn len(&self) -> usize {
        self.actions.len()
    }
    pub fn is_empty(&self) -> bool {
        self.actions.is_empty()
    }

    /// The finished summary as a complete token sequence.
    pub fn summary(&self, eos_id: TokenId, limits: &MdpLimits) -> Result<TokenSeq> {
        TokenSeq::complete(self.actions.clone(), eos_id, limits.horizon)
    }
}

/// Deterministic transition: append the action; terminal on EOS or horizon.
///
/// Stepping from a complete state is a contract violation; absorption is
/// modeled by ending the episode rather than by self-loops.
pub fn step(
    prefix: &TokenSeq,
    action: TokenId,
    eos_id: TokenId,
    limits: &MdpLimits,
) -> Result<(TokenSeq, bool)> {
    if prefix.role() != Role::Prefix {
        return Err(Error::Contract(
            "step requires a prefix-role state".to_string(),
        ));
    }
    if prefix.len() >= limits.horizon {
        return Err(Error::Contract(
            "cannot step from a state at the horizon".to_string(),
        ));
    }
    let mut ids = prefix.ids().to_vec();
    ids.push(action);
    let terminal = action == eos_id || ids.len() == limits.horizon;
    let next = if terminal {
        TokenSeq::complete(ids, eos_id, limits.horizon)?
    } else {
        TokenSeq::prefix(ids, eos_id)?
    };
    Ok((next, terminal))
}

/// Leaf-count guard for [`enumerate_trajectories`].
pub const ENUMERATION_GUARD: f64 = 1e6;

/// Every complete trajectory reachable under the deterministic kernel, each
/// exactly once, in depth-first token-id order. Test oracle for exact
/// expectations over the trajectory distribution.
pub fn enumerate_trajectories(
    _context: &TokenSeq,
    limits: &MdpLimits,
    vocab: &Vocabulary,
) -> Result<Vec<TokenSeq>> {
    let bound = (vocab.size() as f64).powi(limits.horizon as i32);
    if bound > ENUMERATION_GUARD {
        return Err(Error::SizeGuard(bound, ENUMERATION_GUARD));
    }
    let mut out = Vec::new();
    let mut stack = vec![TokenSeq::empty_prefix()];
    while let Some(prefix) = stack.pop() {
        // Push in reverse so trajectories come out in token-id order.
        for action in (0..vocab.size()).rev() {
            let (next, terminal) = step(&prefix, action, vocab.eos_id(), limits)?;
            if terminal {
                out.push(next);
            } else {
                stack.push(next);
            }
        }
    }
    // Depth-first with reversed pushes yields lexicographic order per branch,
    // but completions at different depths interleave; sort for a stable order.
    out.sort_by(|a, b| a.ids().cmp(b.ids()));
    Ok(out)
}
