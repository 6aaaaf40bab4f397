//! Seeded synthetic reward over candidates, used to check the search loop
//! against an exhaustively computed optimum.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand::Rng;

use super::SearchError;
use crate::search_space::{Candidate, SearchSpace};

/// Per-decision effects plus pairwise interactions.
///
/// Decisions are the cell blocks followed by the layer schemes. Pairs are
/// neighbouring decisions and every (cell, own layer) pair, so a scheme's
/// worth depends on the block it sits in.
#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticLandscape {
    space: SearchSpace,
    offset: f64,
    /// `unary[slot][value]`; slots are cells then padded layer positions.
    unary: Vec<Vec<f64>>,
    /// `pair[slot][a][b]` for consecutive slots.
    chain: Vec<Vec<Vec<f64>>>,
    /// `own[cell_slot_layer][block][scheme]`.
    own: Vec<Vec<Vec<f64>>>,
}

fn normal<R: Rng>(rng: &mut R, sd: f64) -> f64 {
    let u1: f64 = rng.gen_range(f64::EPSILON..1.0);
    let u2: f64 = rng.gen();
    sd * (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
}

impl SyntheticLandscape {
    pub fn new(space: &SearchSpace, seed: u64) -> Self {
        Self::with_interaction(space, seed, 0.5)
    }

    pub fn with_interaction(space: &SearchSpace, seed: u64, interaction_sd: f64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (k, s, lmax) = (space.block_choices(), space.scheme_choices(), space.max_layers_per_cell());
        let slots = space.cells * (1 + lmax);
        let width = k.max(s);
        let unary = (0..slots).map(|_| (0..width).map(|_| normal(&mut rng, 1.0)).collect()).collect();
        let chain = (0..slots.saturating_sub(1))
            .map(|_| {
                (0..width)
                    .map(|_| (0..width).map(|_| normal(&mut rng, interaction_sd)).collect())
                    .collect()
            })
            .collect();
        let own = (0..space.cells * lmax)
            .map(|_| (0..k).map(|_| (0..s).map(|_| normal(&mut rng, interaction_sd)).collect()).collect())
            .collect();
        Self {
            space: space.clone(),
            offset: 20.0,
            unary,
            chain,
            own,
        }
    }

    pub fn space(&self) -> &SearchSpace {
        &self.space
    }

    /// Decision value per slot; absent layers (shallower blocks) are `None`.
    fn slots(&self, c: &Candidate) -> Vec<Option<usize>> {
        let lmax = self.space.max_layers_per_cell();
        let mut out: Vec<Option<usize>> = c.cells.iter().map(|b| Some(b.index())).collect();
        let mut layer = 0;
        for &b in &c.cells {
            let n = self.space.layers_of(b);
            for j in 0..lmax {
                out.push((j < n).then(|| c.schemes[layer + j].index()));
            }
            layer += n;
        }
        out
    }

    pub fn reward(&self, c: &Candidate) -> f64 {
        let slots = self.slots(c);
        let mut r = self.offset;
        for (i, v) in slots.iter().enumerate() {
            if let Some(v) = v {
                r += self.unary[i][*v];
            }
        }
        for (i, w) in slots.windows(2).enumerate() {
            if let (Some(a), Some(b)) = (w[0], w[1]) {
                r += self.chain[i][a][b];
            }
        }
        let lmax = self.space.max_layers_per_cell();
        let cells = self.space.cells;
        for (n, block) in c.cells.iter().enumerate() {
            for j in 0..lmax {
                if let Some(s) = slots[cells + n * lmax + j] {
                    r += self.own[n * lmax + j][block.index()][s];
                }
            }
        }
        r
    }

    /// Brute-force argmax (first in enumeration order on ties).
    pub fn optimum(&self) -> Result<(Candidate, f64), SearchError> {
        let mut best: Option<(Candidate, f64)> = None;
        for c in self.space.enumerate()? {
            let r = self.reward(&c);
            if best.as_ref().map_or(true, |(_, b)| r > *b) {
                best = Some((c, r));
            }
        }
        best.ok_or(SearchError::Exhausted)
    }
}
