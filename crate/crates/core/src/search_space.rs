//! Joint architecture/pruning candidates and their binary encoding.
//!
//! A candidate picks one block type per supernet cell and one pruning scheme
//! per prunable layer. The encoding concatenates one-hot groups: all cells
//! first, then every layer in topological order.

use std::collections::HashSet;
use std::fmt;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum SpaceError {
    #[error("invalid candidate: {0}")]
    Invalid(String),
    #[error("search space has {size} candidates, above the enumeration cap {cap}")]
    TooLarge { size: u128, cap: u128 },
    #[error("cannot parse candidate: {0}")]
    Parse(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum BlockChoice {
    /// expand conv → relu → contract conv, residual
    TypeA,
    /// expand conv → relu → 1×1 linear → contract conv, residual
    TypeB,
}

impl BlockChoice {
    pub const ALL: [BlockChoice; 2] = [BlockChoice::TypeA, BlockChoice::TypeB];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Option<Self> {
        Self::ALL.get(i).copied()
    }

    pub fn letter(self) -> char {
        match self {
            BlockChoice::TypeA => 'A',
            BlockChoice::TypeB => 'B',
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PruningScheme {
    Channel,
    Pattern,
    Block,
}

impl PruningScheme {
    pub const ALL: [PruningScheme; 3] = [PruningScheme::Channel, PruningScheme::Pattern, PruningScheme::Block];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Option<Self> {
        Self::ALL.get(i).copied()
    }

    pub fn letter(self) -> char {
        match self {
            PruningScheme::Channel => 'C',
            PruningScheme::Pattern => 'P',
            PruningScheme::Block => 'B',
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            PruningScheme::Channel => "channel",
            PruningScheme::Pattern => "pattern",
            PruningScheme::Block => "block",
        }
    }
}

impl fmt::Display for PruningScheme {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for PruningScheme {
    type Err = SpaceError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim().to_ascii_lowercase().as_str() {
            "c" | "channel" => Ok(PruningScheme::Channel),
            "p" | "pattern" => Ok(PruningScheme::Pattern),
            "b" | "block" => Ok(PruningScheme::Block),
            other => Err(SpaceError::Parse(format!("unknown scheme {other:?}"))),
        }
    }
}

/// Scheme given to layers that appear when a mutation deepens a cell.
pub const DEFAULT_NEW_LAYER_SCHEME: PruningScheme = PruningScheme::Block;

const DEFAULT_ENUMERATION_CAP: u128 = 1_000_000;

/// The searchable space: `cells` slots, each choosing among the registered
/// block types, where block `k` contributes `block_layers[k]` prunable layers.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SearchSpace {
    pub cells: usize,
    pub block_layers: Vec<usize>,
    #[serde(default = "default_cap")]
    pub enumeration_cap: u128,
}

fn default_cap() -> u128 {
    DEFAULT_ENUMERATION_CAP
}

impl SearchSpace {
    pub fn new(cells: usize, block_layers: Vec<usize>) -> Self {
        Self {
            cells,
            block_layers,
            enumeration_cap: DEFAULT_ENUMERATION_CAP,
        }
    }

    /// Every block contributes the same number of prunable layers.
    pub fn fixed_depth(cells: usize, layers_per_block: usize) -> Self {
        Self::new(cells, vec![layers_per_block; BlockChoice::ALL.len()])
    }

    pub fn block_choices(&self) -> usize {
        self.block_layers.len()
    }

    pub fn scheme_choices(&self) -> usize {
        PruningScheme::ALL.len()
    }

    pub fn layers_of(&self, b: BlockChoice) -> usize {
        self.block_layers[b.index()]
    }

    pub fn max_layers_per_cell(&self) -> usize {
        self.block_layers.iter().copied().max().unwrap_or(0)
    }

    /// `K^N`.
    pub fn architecture_count(&self) -> u128 {
        (self.block_choices() as u128).pow(self.cells as u32)
    }

    /// Total number of candidates, summed over architectures.
    pub fn size(&self) -> u128 {
        // per-cell factor Σ_k S^{L_k}, cells independent
        let s = self.scheme_choices() as u128;
        let per_cell: u128 = self.block_layers.iter().map(|&l| s.pow(l as u32)).sum();
        per_cell.pow(self.cells as u32)
    }

    pub fn layer_count(&self, cells: &[BlockChoice]) -> usize {
        cells.iter().map(|&b| self.layers_of(b)).sum()
    }

    pub fn encoding_len(&self, c: &Candidate) -> usize {
        self.cells * self.block_choices() + c.schemes.len() * self.scheme_choices()
    }

    /// Fixed-width predictor input: like the encoding, but every cell reserves
    /// room for its deepest block so all candidates share one length.
    pub fn feature_len(&self) -> usize {
        self.cells * (self.block_choices() + self.max_layers_per_cell() * self.scheme_choices())
    }

    pub fn validate(&self, c: &Candidate) -> Result<(), SpaceError> {
        if c.cells.len() != self.cells {
            return Err(SpaceError::Invalid(format!(
                "{} cells, space has {}",
                c.cells.len(),
                self.cells
            )));
        }
        if let Some(b) = c.cells.iter().find(|b| b.index() >= self.block_choices()) {
            return Err(SpaceError::Invalid(format!("block {b:?} not registered")));
        }
        let expect = self.layer_count(&c.cells);
        if c.schemes.len() != expect {
            return Err(SpaceError::Invalid(format!(
                "{} layer schemes, blocks define {expect}",
                c.schemes.len()
            )));
        }
        Ok(())
    }

    pub fn encode(&self, c: &Candidate) -> Result<Vec<u8>, SpaceError> {
        self.validate(c)?;
        let (k, s) = (self.block_choices(), self.scheme_choices());
        let mut bits = vec![0u8; self.encoding_len(c)];
        for (i, b) in c.cells.iter().enumerate() {
            bits[i * k + b.index()] = 1;
        }
        let off = self.cells * k;
        for (j, sch) in c.schemes.iter().enumerate() {
            bits[off + j * s + sch.index()] = 1;
        }
        Ok(bits)
    }

    pub fn decode(&self, bits: &[u8]) -> Result<Candidate, SpaceError> {
        let (k, s) = (self.block_choices(), self.scheme_choices());
        if bits.len() < self.cells * k {
            return Err(SpaceError::Invalid(format!("encoding of {} bits is too short", bits.len())));
        }
        let one_hot = |group: &[u8]| -> Result<usize, SpaceError> {
            if group.iter().any(|&b| b > 1) || group.iter().filter(|&&b| b == 1).count() != 1 {
                return Err(SpaceError::Invalid(format!("group {group:?} is not one-hot")));
            }
            Ok(group.iter().position(|&b| b == 1).expect("one set bit"))
        };
        let cells = bits[..self.cells * k]
            .chunks(k)
            .map(|g| one_hot(g).map(|i| BlockChoice::from_index(i).expect("index < K")))
            .collect::<Result<Vec<_>, _>>()?;
        let rest = &bits[self.cells * k..];
        if rest.len() != self.layer_count(&cells) * s {
            return Err(SpaceError::Invalid(format!(
                "{} scheme bits, blocks require {}",
                rest.len(),
                self.layer_count(&cells) * s
            )));
        }
        let schemes = rest
            .chunks(s)
            .map(|g| one_hot(g).map(|i| PruningScheme::from_index(i).expect("index < S")))
            .collect::<Result<Vec<_>, _>>()?;
        Ok(Candidate { cells, schemes })
    }

    pub fn features(&self, c: &Candidate) -> Vec<f64> {
        let (k, s, lmax) = (self.block_choices(), self.scheme_choices(), self.max_layers_per_cell());
        let per_cell = k + lmax * s;
        let mut f = vec![0.0; self.feature_len()];
        let mut layer = 0;
        for (i, b) in c.cells.iter().enumerate() {
            f[i * per_cell + b.index()] = 1.0;
            for j in 0..self.layers_of(*b) {
                f[i * per_cell + k + j * s + c.schemes[layer].index()] = 1.0;
                layer += 1;
            }
        }
        f
    }

    pub fn random<R: Rng + ?Sized>(&self, rng: &mut R) -> Candidate {
        let cells: Vec<BlockChoice> = (0..self.cells)
            .map(|_| BlockChoice::from_index(rng.gen_range(0..self.block_choices())).expect("in range"))
            .collect();
        let schemes = (0..self.layer_count(&cells))
            .map(|_| PruningScheme::from_index(rng.gen_range(0..self.scheme_choices())).expect("in range"))
            .collect();
        Candidate { cells, schemes }
    }

    /// Changes one random decision group: a cell's block or a layer's scheme.
    pub fn mutate<R: Rng + ?Sized>(&self, c: &Candidate, rng: &mut R) -> Candidate {
        let groups = self.cells + c.schemes.len();
        let g = rng.gen_range(0..groups);
        if g < self.cells {
            self.mutate_with(c, Mutation::Cell(g), rng)
        } else {
            self.mutate_with(c, Mutation::Layer(g - self.cells), rng)
        }
    }

    /// Applies a mutation at a chosen group; the replacement value is drawn
    /// uniformly from the other choices.
    ///
    /// When a cell changes to a block with a different layer count, its layer
    /// schemes are kept positionally, truncated, or padded with
    /// [`DEFAULT_NEW_LAYER_SCHEME`].
    pub fn mutate_with<R: Rng + ?Sized>(&self, c: &Candidate, m: Mutation, rng: &mut R) -> Candidate {
        match m {
            Mutation::Cell(cell) => {
                let old = c.cells[cell];
                let mut pick = rng.gen_range(0..self.block_choices() - 1);
                if pick >= old.index() {
                    pick += 1;
                }
                let new = BlockChoice::from_index(pick).expect("in range");
                let start: usize = c.cells[..cell].iter().map(|&b| self.layers_of(b)).sum();
                let old_layers = &c.schemes[start..start + self.layers_of(old)];
                let remapped = (0..self.layers_of(new))
                    .map(|j| old_layers.get(j).copied().unwrap_or(DEFAULT_NEW_LAYER_SCHEME));
                let mut schemes = c.schemes[..start].to_vec();
                schemes.extend(remapped);
                schemes.extend_from_slice(&c.schemes[start + self.layers_of(old)..]);
                let mut cells = c.cells.clone();
                cells[cell] = new;
                Candidate { cells, schemes }
            }
            Mutation::Layer(layer) => {
                let old = c.schemes[layer];
                let mut pick = rng.gen_range(0..self.scheme_choices() - 1);
                if pick >= old.index() {
                    pick += 1;
                }
                let mut next = c.clone();
                next.schemes[layer] = PruningScheme::from_index(pick).expect("in range");
                next
            }
        }
    }

    /// All candidates in lexicographic order (cells first, then schemes).
    pub fn enumerate(&self) -> Result<impl Iterator<Item = Candidate> + '_, SpaceError> {
        let size = self.size();
        if size > self.enumeration_cap {
            return Err(SpaceError::TooLarge {
                size,
                cap: self.enumeration_cap,
            });
        }
        let k = self.block_choices();
        let s = self.scheme_choices();
        let archs = self.architecture_count() as usize;
        Ok((0..archs).flat_map(move |mut a| {
            let mut cells = vec![BlockChoice::TypeA; self.cells];
            for slot in cells.iter_mut().rev() {
                *slot = BlockChoice::from_index(a % k).expect("in range");
                a /= k;
            }
            let layers = self.layer_count(&cells);
            let combos = s.pow(layers as u32);
            (0..combos).map(move |mut code| {
                let mut schemes = vec![PruningScheme::Channel; layers];
                for slot in schemes.iter_mut().rev() {
                    *slot = PruningScheme::from_index(code % s).expect("in range");
                    code /= s;
                }
                Candidate {
                    cells: cells.clone(),
                    schemes,
                }
            })
        }))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mutation {
    Cell(usize),
    Layer(usize),
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Candidate {
    pub cells: Vec<BlockChoice>,
    pub schemes: Vec<PruningScheme>,
}

impl Candidate {
    /// Number of differing decisions, counting cells and the layer positions
    /// present in both candidates plus any length difference.
    pub fn decision_distance(&self, other: &Candidate) -> usize {
        let cells = self.cells.iter().zip(&other.cells).filter(|(a, b)| a != b).count();
        if cells > 0 && self.schemes.len() != other.schemes.len() {
            return cells;
        }
        let layers = self.schemes.iter().zip(&other.schemes).filter(|(a, b)| a != b).count();
        cells + layers + self.schemes.len().abs_diff(other.schemes.len())
    }
}

impl fmt::Display for Candidate {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str("cells=")?;
        for b in &self.cells {
            write!(f, "{}", b.letter())?;
        }
        f.write_str(";schemes=")?;
        for (i, s) in self.schemes.iter().enumerate() {
            if i > 0 {
                f.write_str(",")?;
            }
            write!(f, "{}", s.letter())?;
        }
        Ok(())
    }
}

impl FromStr for Candidate {
    type Err = SpaceError;

    /// Parses the `cells=AB;schemes=C,P,B,B` text form.
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let mut cells = None;
        let mut schemes = None;
        for part in s.trim().split(';') {
            let (key, value) = part
                .split_once('=')
                .ok_or_else(|| SpaceError::Parse(format!("missing '=' in {part:?}")))?;
            match key.trim() {
                "cells" => {
                    cells = Some(
                        value
                            .trim()
                            .chars()
                            .map(|ch| match ch.to_ascii_uppercase() {
                                'A' => Ok(BlockChoice::TypeA),
                                'B' => Ok(BlockChoice::TypeB),
                                other => Err(SpaceError::Parse(format!("unknown block {other:?}"))),
                            })
                            .collect::<Result<Vec<_>, _>>()?,
                    )
                }
                "schemes" => {
                    let v = value.trim();
                    schemes = Some(if v.is_empty() {
                        Vec::new()
                    } else {
                        v.split(',').map(str::parse).collect::<Result<Vec<_>, _>>()?
                    })
                }
                other => return Err(SpaceError::Parse(format!("unknown key {other:?}"))),
            }
        }
        Ok(Candidate {
            cells: cells.ok_or_else(|| SpaceError::Parse("missing cells".into()))?,
            schemes: schemes.ok_or_else(|| SpaceError::Parse("missing schemes".into()))?,
        })
    }
}

pub fn bits_to_string(bits: &[u8]) -> String {
    bits.iter().map(|&b| if b == 1 { '1' } else { '0' }).collect()
}

pub fn parse_bits(s: &str) -> Result<Vec<u8>, SpaceError> {
    s.trim()
        .chars()
        .map(|c| match c {
            '0' => Ok(0),
            '1' => Ok(1),
            other => Err(SpaceError::Parse(format!("bad bit {other:?}"))),
        })
        .collect()
}

impl SearchSpace {
    /// Accepts either the text form or a raw bit string.
    pub fn parse_candidate(&self, s: &str) -> Result<Candidate, SpaceError> {
        let c = if s.contains('=') {
            s.parse()?
        } else {
            self.decode(&parse_bits(s)?)?
        };
        self.validate(&c)?;
        Ok(c)
    }

    pub fn distinct(&self, cands: &[Candidate]) -> usize {
        cands.iter().collect::<HashSet<_>>().len()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use BlockChoice::*;
    use PruningScheme::*;

    #[test]
    fn encode_single_cell_single_layer() {
        let space = SearchSpace::fixed_depth(1, 1);
        let c = Candidate {
            cells: vec![TypeA],
            schemes: vec![Channel],
        };
        assert_eq!(space.encode(&c).unwrap(), vec![1, 0, 1, 0, 0]);
    }

    #[test]
    fn encode_all_type_b_all_block() {
        let space = SearchSpace::fixed_depth(2, 2);
        let c = Candidate {
            cells: vec![TypeB, TypeB],
            schemes: vec![Block; 4],
        };
        let mut expect = vec![0, 1, 0, 1];
        for _ in 0..4 {
            expect.extend([0, 0, 1]);
        }
        assert_eq!(space.encode(&c).unwrap(), expect);
    }

    #[test]
    fn encode_rejects_invalid() {
        let space = SearchSpace::fixed_depth(2, 2);
        let c = Candidate {
            cells: vec![TypeA],
            schemes: vec![Block; 2],
        };
        assert!(matches!(space.encode(&c), Err(SpaceError::Invalid(_))));
        assert!(space.decode(&[1, 1, 0, 1]).is_err());
    }

    #[test]
    fn random_round_trips() {
        let space = SearchSpace::new(3, vec![2, 3]);
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..1000 {
            let c = space.random(&mut rng);
            assert_eq!(space.decode(&space.encode(&c).unwrap()).unwrap(), c);
            assert_eq!(space.parse_candidate(&c.to_string()).unwrap(), c);
        }
    }

    #[test]
    fn forced_cell_mutation_flips_single_cell() {
        let space = SearchSpace::fixed_depth(1, 2);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let c = Candidate {
            cells: vec![TypeA],
            schemes: vec![Pattern, Channel],
        };
        let m = space.mutate_with(&c, Mutation::Cell(0), &mut rng);
        assert_eq!(m.cells, vec![TypeB]);
        assert_eq!(m.schemes, c.schemes);
    }

    #[test]
    fn mutation_changes_exactly_one_group() {
        let space = SearchSpace::fixed_depth(3, 2);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..10_000 {
            let c = space.random(&mut rng);
            let m = space.mutate(&c, &mut rng);
            assert_eq!(c.decision_distance(&m), 1);
            // every other one-hot group is byte-identical after re-encoding
            let (a, b) = (space.encode(&c).unwrap(), space.encode(&m).unwrap());
            let differing_bits = a.iter().zip(&b).filter(|(x, y)| x != y).count();
            assert_eq!(differing_bits, 2);
        }
    }

    #[test]
    fn double_mutation_can_return() {
        let space = SearchSpace::fixed_depth(2, 2);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let c = space.random(&mut rng);
        let returned = (0..100)
            .filter(|_| {
                let m = space.mutate(&c, &mut rng);
                space.mutate(&m, &mut rng) == c
            })
            .count();
        assert!(returned > 0);
    }

    #[test]
    fn depth_changing_mutation_pads_with_block() {
        let space = SearchSpace::new(2, vec![2, 3]);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let c = Candidate {
            cells: vec![TypeA, TypeA],
            schemes: vec![Channel, Pattern, Pattern, Channel],
        };
        let m = space.mutate_with(&c, Mutation::Cell(0), &mut rng);
        assert_eq!(m.cells, vec![TypeB, TypeA]);
        assert_eq!(m.schemes, vec![Channel, Pattern, Block, Pattern, Channel]);
        space.validate(&m).unwrap();
        let back = space.mutate_with(&m, Mutation::Cell(0), &mut rng);
        assert_eq!(back, c);
    }

    #[test]
    fn enumeration_counts() {
        let space = SearchSpace::fixed_depth(1, 1);
        assert_eq!(space.enumerate().unwrap().count(), 6);
        let space = SearchSpace::fixed_depth(2, 2);
        let all: Vec<_> = space.enumerate().unwrap().collect();
        assert_eq!(all.len(), 324);
        assert_eq!(space.distinct(&all), 324);
        assert_eq!(space.size(), 324);
        let mixed = SearchSpace::new(2, vec![2, 3]);
        let all: Vec<_> = mixed.enumerate().unwrap().collect();
        assert_eq!(all.len() as u128, mixed.size());
        assert_eq!(mixed.distinct(&all), all.len());
        assert!(all.iter().all(|c| mixed.validate(c).is_ok()));
    }

    #[test]
    fn enumeration_cap_enforced() {
        let mut space = SearchSpace::fixed_depth(8, 3);
        assert!(matches!(space.enumerate().err(), Some(SpaceError::TooLarge { .. })));
        space.enumeration_cap = u128::MAX;
        assert!(space.enumerate().is_ok());
    }

    #[test]
    fn features_match_encoding_for_fixed_depth() {
        let space = SearchSpace::fixed_depth(2, 2);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..50 {
            let c = space.random(&mut rng);
            let enc: Vec<f64> = space.encode(&c).unwrap().iter().map(|&b| b as f64).collect();
            let feat = space.features(&c);
            assert_eq!(feat.len(), enc.len());
            assert_eq!(feat.iter().sum::<f64>(), enc.iter().sum::<f64>());
        }
    }

    proptest! {
        #[test]
        fn encode_decode_bijection(seed in any::<u64>(), cells in 1usize..5) {
            let space = SearchSpace::new(cells, vec![2, 3]);
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let c = space.random(&mut rng);
            let bits = space.encode(&c).unwrap();
            prop_assert_eq!(bits.len(), space.encoding_len(&c));
            prop_assert_eq!(space.decode(&bits).unwrap(), c.clone());
            prop_assert_eq!(space.decode(&parse_bits(&bits_to_string(&bits)).unwrap()).unwrap(), c);
        }
    }
}
