//! Cascade-style interactive error reconciliation.
//!
//! The corrector (Bob) never reveals his own bits; he queries the
//! reference keyholder (Alice) for parities of blocks of her key under
//! public shuffles and binary-searches every parity mismatch down to a
//! single position. A corrected bit toggles the parities of its blocks
//! in all earlier passes, which re-opens any of those blocks whose
//! parity now disagrees - the cascade that removes even-weight error
//! patterns pass by pass.
//!
//! Leakage is exactly the number of parity bits the reference side
//! disclosed.

use std::collections::{BTreeSet, HashMap};

use rand::Rng as _;

use super::bits::Bits;
use crate::error::{Error, Result, Stage};
use crate::rng::{seeded, Rng};

/// First-pass block size: ceil(0.73 / qber), clamped to [1, n]. A zero
/// QBER estimate degenerates to whole-key blocks.
pub fn initial_block_size(qber: f64, n: usize) -> usize {
    if n == 0 {
        return 1;
    }
    if qber <= 0.0 {
        return n;
    }
    ((0.73 / qber).ceil() as usize).clamp(1, n)
}

/// Public permutation of `0..n`; seed 0 is the identity (pass 0).
pub fn permutation(n: usize, seed: u64) -> Vec<u32> {
    let mut perm: Vec<u32> = (0..n as u32).collect();
    if seed != 0 {
        let mut rng = seeded(seed);
        for i in (1..n).rev() {
            let j = rng.gen_range(0..=i);
            perm.swap(i, j);
        }
    }
    perm
}

/// Parity of the key bits at permuted slots `[start, end)`.
pub fn range_parity(key: &Bits, perm: &[u32], start: usize, end: usize) -> bool {
    key.parity_at(perm[start..end].iter().map(|&p| p as usize))
}

/// The reference side's answers to parity queries.
pub trait ParityOracle {
    fn top_parities(&mut self, pass: u32, shuffle_seed: u64, block_size: usize)
        -> Result<Vec<bool>>;
    fn interval_parity(
        &mut self,
        pass: u32,
        shuffle_seed: u64,
        interval: (usize, usize),
    ) -> Result<bool>;
}

/// In-process oracle over the reference key; used for standalone
/// reconciliation and by the reference party itself.
pub struct LocalOracle<'a> {
    key: &'a Bits,
    perms: HashMap<u64, Vec<u32>>,
}

impl<'a> LocalOracle<'a> {
    pub fn new(key: &'a Bits) -> Self {
        LocalOracle { key, perms: HashMap::new() }
    }

    fn perm(&mut self, seed: u64) -> &Vec<u32> {
        let n = self.key.len();
        self.perms.entry(seed).or_insert_with(|| permutation(n, seed))
    }
}

impl ParityOracle for LocalOracle<'_> {
    fn top_parities(
        &mut self,
        _pass: u32,
        shuffle_seed: u64,
        block_size: usize,
    ) -> Result<Vec<bool>> {
        let key = self.key;
        let perm = self.perm(shuffle_seed);
        Ok(block_parities(key, perm, block_size))
    }

    fn interval_parity(
        &mut self,
        _pass: u32,
        shuffle_seed: u64,
        (s, e): (usize, usize),
    ) -> Result<bool> {
        let key = self.key;
        let perm = self.perm(shuffle_seed);
        if e > perm.len() || s >= e {
            return Err(Error::Protocol(format!("bad parity interval ({s}, {e})")));
        }
        Ok(range_parity(key, perm, s, e))
    }
}

/// Parities of consecutive `block_size` chunks of the permuted key.
pub fn block_parities(key: &Bits, perm: &[u32], block_size: usize) -> Vec<bool> {
    let n = perm.len();
    let blocks = n.div_ceil(block_size.max(1));
    (0..blocks)
        .map(|b| range_parity(key, perm, b * block_size, ((b + 1) * block_size).min(n)))
        .collect()
}

struct PassState {
    seed: u64,
    k: usize,
    perm: Vec<u32>,
    /// Position -> permuted slot.
    inv: Vec<u32>,
    alice: Vec<bool>,
    bob: Vec<bool>,
}

#[derive(Debug, Clone, Copy, Default)]
pub struct CascadeOutcome {
    /// Parity bits disclosed by the reference side.
    pub parity_bits: u64,
    /// Bits flipped in the corrected key.
    pub corrections: u64,
}

/// Run Cascade against `oracle`, correcting `key` in place. Block sizes
/// start at `initial_block_size(qber, n)` and double each pass; shuffle
/// seeds for passes past the first come from `rng`.
pub fn cascade_correct<O: ParityOracle>(
    key: &mut Bits,
    qber: f64,
    passes: u32,
    rng: &mut Rng,
    oracle: &mut O,
) -> Result<CascadeOutcome> {
    let n = key.len();
    let mut outcome = CascadeOutcome::default();
    if n == 0 {
        return Ok(outcome);
    }
    let k1 = initial_block_size(qber, n);
    let mut states: Vec<PassState> = Vec::with_capacity(passes as usize);
    let mut worklist: BTreeSet<(usize, usize)> = BTreeSet::new();
    // Honest runs correct at most ~qber * n bits; corrupted parity data
    // can send the search in circles, so bound the work.
    let correction_cap = 2 * n as u64 + 64;

    for p in 0..passes {
        let seed = if p == 0 { 0 } else { rng.gen() };
        let k = k1.saturating_mul(1usize << p.min(62)).min(n);
        let perm = permutation(n, seed);
        let mut inv = vec![0u32; n];
        for (slot, &pos) in perm.iter().enumerate() {
            inv[pos as usize] = slot as u32;
        }
        let alice = oracle.top_parities(p, seed, k)?;
        outcome.parity_bits += alice.len() as u64;
        let bob = block_parities(key, &perm, k);
        if alice.len() != bob.len() {
            return Err(Error::Protocol(format!(
                "oracle returned {} parities for {} blocks",
                alice.len(),
                bob.len()
            )));
        }
        let pass_idx = states.len();
        for b in 0..bob.len() {
            if alice[b] != bob[b] {
                worklist.insert((pass_idx, b));
            }
        }
        states.push(PassState { seed, k, perm, inv, alice, bob });

        while let Some(&(q, b)) = worklist.iter().next() {
            worklist.remove(&(q, b));
            let st = &states[q];
            if st.alice[b] == st.bob[b] {
                continue;
            }
            // Binary search: one parity per level; the untested half's
            // parity is implied by the block's.
            let mut s = b * st.k;
            let mut e = ((b + 1) * st.k).min(n);
            while e - s > 1 {
                let mid = s + (e - s) / 2;
                let pa = oracle.interval_parity(q as u32, st.seed, (s, mid))?;
                outcome.parity_bits += 1;
                let pb = range_parity(key, &st.perm, s, mid);
                if pa != pb {
                    e = mid;
                } else {
                    s = mid;
                }
            }
            let pos = st.perm[s] as usize;
            key.flip(pos);
            outcome.corrections += 1;
            if outcome.corrections > correction_cap {
                return Err(Error::Abort {
                    stage: Stage::Reconcile,
                    reason: "reconciliation did not converge".into(),
                });
            }
            for (r, st) in states.iter_mut().enumerate() {
                let blk = st.inv[pos] as usize / st.k;
                st.bob[blk] = !st.bob[blk];
                if st.bob[blk] != st.alice[blk] {
                    worklist.insert((r, blk));
                } else {
                    worklist.remove(&(r, blk));
                }
            }
        }
    }
    Ok(outcome)
}

/// Standalone joint reconciliation of two keys: Bob's copy is corrected
/// toward Alice's, which is never modified. Returns the corrected key
/// and the exact parity leakage.
#[derive(Debug, Clone)]
pub struct ReconcileOutcome {
    pub corrected: Bits,
    pub parity_bits: u64,
    pub corrections: u64,
}

pub fn reconcile(
    alice_key: &Bits,
    bob_key: &Bits,
    qber: f64,
    passes: u32,
    seed: u64,
) -> Result<ReconcileOutcome> {
    if alice_key.len() != bob_key.len() {
        return Err(Error::Protocol("key length mismatch".into()));
    }
    let mut corrected = bob_key.clone();
    let mut oracle = LocalOracle::new(alice_key);
    let mut rng = seeded(seed);
    let out = cascade_correct(&mut corrected, qber, passes, &mut rng, &mut oracle)?;
    Ok(ReconcileOutcome {
        corrected,
        parity_bits: out.parity_bits,
        corrections: out.corrections,
    })
}
