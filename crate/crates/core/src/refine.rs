//! Partitions of a finite ground set `0..n` and their refinement order.
//!
//! Partitions are stored with blocks numbered by first occurrence, so two
//! partitions with the same blocks compare equal structurally.

use std::collections::HashMap;
use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct Partition {
    block_of: Vec<usize>,
    num_blocks: usize,
}

impl Partition {
    /// Builds a partition from arbitrary block labels and canonicalises them.
    pub fn from_labels<T: Eq + std::hash::Hash>(labels: &[T]) -> Self {
        let mut ids = HashMap::new();
        let block_of = labels
            .iter()
            .map(|l| {
                let next = ids.len();
                *ids.entry(l).or_insert(next)
            })
            .collect();
        Self {
            block_of,
            num_blocks: ids.len(),
        }
    }

    /// Builds a partition from explicit blocks; the blocks must cover `0..n`
    /// exactly once.
    pub fn from_blocks(n: usize, blocks: &[Vec<usize>]) -> Result<Self> {
        let mut labels = vec![usize::MAX; n];
        for (b, block) in blocks.iter().enumerate() {
            if block.is_empty() {
                return Err(Error::contract("empty block"));
            }
            for &i in block {
                if i >= n || labels[i] != usize::MAX {
                    return Err(Error::contract(format!(
                        "index {i} is out of range or in two blocks"
                    )));
                }
                labels[i] = b;
            }
        }
        if labels.contains(&usize::MAX) {
            return Err(Error::contract("blocks do not cover the ground set"));
        }
        Ok(Self::from_labels(&labels))
    }

    /// The single-block partition.
    pub fn trivial(n: usize) -> Self {
        Self {
            block_of: vec![0; n],
            num_blocks: usize::from(n > 0),
        }
    }

    pub fn ground_size(&self) -> usize {
        self.block_of.len()
    }

    pub fn num_blocks(&self) -> usize {
        self.num_blocks
    }

    pub fn block_of(&self) -> &[usize] {
        &self.block_of
    }

    pub fn blocks(&self) -> Vec<Vec<usize>> {
        let mut out = vec![Vec::new(); self.num_blocks];
        for (i, &b) in self.block_of.iter().enumerate() {
            out[b].push(i);
        }
        out
    }

    /// Every restricted growth string of length `n`, i.e. every partition of
    /// `0..n` exactly once.
    pub fn all(n: usize) -> Vec<Partition> {
        fn grow(prefix: &mut Vec<usize>, max: usize, n: usize, out: &mut Vec<Partition>) {
            if prefix.len() == n {
                out.push(Partition {
                    block_of: prefix.clone(),
                    num_blocks: if n == 0 { 0 } else { max + 1 },
                });
                return;
            }
            let top = if prefix.is_empty() { 0 } else { max + 1 };
            for b in 0..=top {
                prefix.push(b);
                grow(prefix, max.max(b), n, out);
                prefix.pop();
            }
        }
        let mut out = Vec::new();
        grow(&mut Vec::with_capacity(n), 0, n, &mut out);
        out
    }
}

fn same_size(a: &Partition, b: &Partition) -> Result<()> {
    if a.ground_size() != b.ground_size() {
        return Err(Error::InvalidShape {
            op: "partition",
            lhs: vec![a.ground_size()],
            rhs: vec![b.ground_size()],
        });
    }
    Ok(())
}

/// True iff every block of `a` lies inside one block of `b`.
pub fn is_finer(a: &Partition, b: &Partition) -> Result<bool> {
    same_size(a, b)?;
    let mut image = vec![usize::MAX; a.num_blocks];
    for (&ba, &bb) in a.block_of.iter().zip(&b.block_of) {
        if image[ba] == usize::MAX {
            image[ba] = bb;
        } else if image[ba] != bb {
            return Ok(false);
        }
    }
    Ok(true)
}

/// Coarsest common refinement: blocks are the nonempty intersections.
pub fn meet_refinement(tasks: &[Partition]) -> Result<Partition> {
    let first = tasks
        .first()
        .ok_or_else(|| Error::contract("meet of an empty list"))?;
    for t in &tasks[1..] {
        same_size(first, t)?;
    }
    let keys: Vec<Vec<usize>> = (0..first.ground_size())
        .map(|i| tasks.iter().map(|t| t.block_of[i]).collect())
        .collect();
    Ok(Partition::from_labels(&keys))
}

/// Each point in its own block.
pub fn instance_discrimination(n: usize) -> Partition {
    Partition {
        block_of: (0..n).collect(),
        num_blocks: n,
    }
}

/// For `fine` finer than `coarse`, lists for each coarse block the fine
/// blocks whose union it is. Fails if `fine` is not a refinement.
pub fn union_decomposition(fine: &Partition, coarse: &Partition) -> Result<Vec<Vec<usize>>> {
    if !is_finer(fine, coarse)? {
        return Err(Error::contract("first partition does not refine the second"));
    }
    let mut out = vec![Vec::new(); coarse.num_blocks];
    let mut seen = vec![false; fine.num_blocks];
    for (&bf, &bc) in fine.block_of.iter().zip(&coarse.block_of) {
        if !seen[bf] {
            seen[bf] = true;
            out[bc].push(bf);
        }
    }
    Ok(out)
}

impl fmt::Display for Partition {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}:", self.ground_size())?;
        for b in &self.block_of {
            write!(f, " {b}")?;
        }
        Ok(())
    }
}

impl FromStr for Partition {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let (head, rest) = s
            .trim()
            .split_once(':')
            .ok_or_else(|| Error::format(0, "partition line lacks ':'"))?;
        let n: usize = head
            .trim()
            .parse()
            .map_err(|_| Error::format(0, format!("bad ground size {head:?}")))?;
        let labels = rest
            .split_whitespace()
            .map(|t| t.parse::<usize>())
            .collect::<std::result::Result<Vec<_>, _>>()
            .map_err(|e| Error::format(head.len() as u64 + 1, e.to_string()))?;
        if labels.len() != n {
            return Err(Error::format(
                0,
                format!("expected {n} labels, found {}", labels.len()),
            ));
        }
        Ok(Self::from_labels(&labels))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn p(n: usize, blocks: &[&[usize]]) -> Partition {
        let blocks: Vec<Vec<usize>> = blocks.iter().map(|b| b.iter().map(|i| i - 1).collect()).collect();
        Partition::from_blocks(n, &blocks).unwrap()
    }

    #[test]
    fn fineness_examples() {
        assert!(is_finer(&p(4, &[&[1], &[2], &[3, 4]]), &p(4, &[&[1, 2], &[3, 4]])).unwrap());
        assert!(!is_finer(&p(4, &[&[1, 3], &[2, 4]]), &p(4, &[&[1, 2], &[3, 4]])).unwrap());
        let q = p(4, &[&[1, 4], &[2, 3]]);
        assert!(is_finer(&q, &q).unwrap());
        assert!(is_finer(&q, &Partition::trivial(3)).is_err());
    }

    #[test]
    fn meet_examples() {
        let m = meet_refinement(&[p(4, &[&[1, 2], &[3, 4]]), p(4, &[&[1, 3], &[2, 4]])]).unwrap();
        assert_eq!(m, instance_discrimination(4));
        let single = p(4, &[&[1, 2, 3], &[4]]);
        assert_eq!(meet_refinement(std::slice::from_ref(&single)).unwrap(), single);
        assert!(meet_refinement(&[]).is_err());
    }

    #[test]
    fn aquatic_animal_meet_has_four_blocks() {
        // fish, frog-on-land, boat, car
        let aquatic = Partition::from_labels(&[true, false, true, false]);
        let animal = Partition::from_labels(&[true, true, false, false]);
        let m = meet_refinement(&[aquatic, animal]).unwrap();
        assert_eq!(m.num_blocks(), 4);
    }

    #[test]
    fn instance_discrimination_is_finest_and_absorbing() {
        assert_eq!(instance_discrimination(3), p(3, &[&[1], &[2], &[3]]));
        for q in Partition::all(4) {
            assert!(is_finer(&instance_discrimination(4), &q).unwrap());
            assert_eq!(
                meet_refinement(&[instance_discrimination(4), q]).unwrap(),
                instance_discrimination(4)
            );
        }
    }

    #[test]
    fn bell_numbers() {
        let counts: Vec<usize> = (0..=6).map(|n| Partition::all(n).len()).collect();
        assert_eq!(counts, [1, 1, 2, 5, 15, 52, 203]);
    }

    #[test]
    fn text_round_trip() {
        let q = p(5, &[&[1, 4], &[2], &[3, 5]]);
        assert_eq!(q.to_string(), "5: 0 1 2 0 2");
        assert_eq!(q.to_string().parse::<Partition>().unwrap(), q);
        assert!("3: 0 1".parse::<Partition>().is_err());
        assert!("0 1".parse::<Partition>().is_err());
    }

    #[test]
    fn union_lemma() {
        let fine = p(5, &[&[1], &[2, 3], &[4], &[5]]);
        let coarse = p(5, &[&[1, 2, 3], &[4, 5]]);
        assert_eq!(union_decomposition(&fine, &coarse).unwrap(), vec![vec![0, 1], vec![2, 3]]);
        assert!(union_decomposition(&coarse, &fine).is_err());
    }
}
