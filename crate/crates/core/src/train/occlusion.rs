use rand::Rng;

use crate::error::{Error, Result};
use crate::tokenizer::TokenId;

/// Inputs after occlusion plus a flag per position marking replacements.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Occluded {
    pub inputs: Vec<TokenId>,
    pub flags: Vec<bool>,
}

impl Occluded {
    pub fn count(&self) -> usize {
        self.flags.iter().filter(|&&f| f).count()
    }
}

/// Replaces each eligible input id with `occ_id` independently with
/// probability `p`. Ids listed in `protected` (padding, end-of-text) are
/// never replaced. Only inputs are touched; loss targets stay as packed.
pub fn occlude_batch<R: Rng + ?Sized>(
    inputs: &[TokenId],
    p: f64,
    occ_id: TokenId,
    protected: &[TokenId],
    rng: &mut R,
) -> Result<Occluded> {
    if !(0.0..=1.0).contains(&p) {
        return Err(Error::Config(format!("occlusion probability must lie in [0, 1], got {p}")));
    }
    if protected.contains(&occ_id) {
        return Err(Error::Config(format!(
            "occlusion id {occ_id} is also a protected special id"
        )));
    }
    if inputs.contains(&occ_id) {
        return Err(Error::Config(format!(
            "occlusion id {occ_id} already appears as a content token"
        )));
    }
    let mut out = inputs.to_vec();
    let mut flags = vec![false; inputs.len()];
    if p > 0.0 {
        for (slot, flag) in out.iter_mut().zip(flags.iter_mut()) {
            let u: f64 = rng.gen();
            if u < p && !protected.contains(slot) {
                *slot = occ_id;
                *flag = true;
            }
        }
    }
    Ok(Occluded { inputs: out, flags })
}
