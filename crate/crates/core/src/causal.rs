//! Finite structural causal models over content `C`, style `S`, observation
//! `X`, a proxy task `Y^R` and downstream tasks `Y_t`, with do-interventions
//! on style and brute-force invariance checks.
//!
//! The graph is fixed: `C → X ← S`, `C → Y^R → Y_t`. Tasks only see `Y^R`,
//! so every task is a coarsening of the proxy task by construction.

use std::fmt::Write as _;
use std::ops::Range;
use std::sync::Arc;

use rand::Rng as _;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::refine::Partition;
use crate::rng::{stream, Rng};

const ROW_TOL: f64 = 1e-12;
/// Conditioning cells with less mass than this are treated as undefined.
const MASS_EPS: f64 = 1e-14;
/// Largest joint `intervene` will materialise.
const MAX_JOINT: usize = 1 << 24;

/// `P(Y_t | Y^R)` as a row-stochastic `|Y^R| × |Y_t|` table.
#[derive(Clone, Debug, PartialEq)]
pub struct TaskMechanism {
    pub size: usize,
    pub table: Vec<f64>,
}

impl TaskMechanism {
    /// Deterministic task labelling each block of `partition` (a partition of
    /// the `Y^R` values) with `labels[block]`.
    pub fn from_partition(partition: &Partition, labels: &[usize], size: usize) -> Result<Self> {
        if labels.len() != partition.num_blocks() {
            return Err(Error::contract(format!(
                "{} labels for {} blocks",
                labels.len(),
                partition.num_blocks()
            )));
        }
        if let Some(&l) = labels.iter().find(|&&l| l >= size) {
            return Err(Error::contract(format!("label {l} outside task domain {size}")));
        }
        let r = partition.ground_size();
        let mut table = vec![0.0; r * size];
        for (ri, &b) in partition.block_of().iter().enumerate() {
            table[ri * size + labels[b]] = 1.0;
        }
        Ok(Self { size, table })
    }

    /// The task that copies `Y^R`.
    pub fn identity(r: usize) -> Self {
        Self::from_partition(
            &crate::refine::instance_discrimination(r),
            &(0..r).collect::<Vec<_>>(),
            r,
        )
        .expect("identity labelling is valid")
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DiscreteSCM {
    pub n_c: usize,
    pub n_s: usize,
    pub n_x: usize,
    pub n_r: usize,
    pub p_c: Vec<f64>,
    pub p_s: Vec<f64>,
    /// `P(X | C, S)`, row `(c·|S| + s)`.
    pub p_x: Vec<f64>,
    /// `P(Y^R | C)`, row `c`.
    pub p_r: Vec<f64>,
    pub tasks: Arc<[TaskMechanism]>,
}

/// `f(X)` as a lookup table into `0..n_z`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RepresentationTable {
    pub n_z: usize,
    pub map: Vec<usize>,
}

impl RepresentationTable {
    pub fn new(n_z: usize, map: Vec<usize>) -> Result<Self> {
        if n_z == 0 || map.iter().any(|&z| z >= n_z) {
            return Err(Error::contract("representation value outside its codomain"));
        }
        Ok(Self { n_z, map })
    }

    pub fn constant(n_x: usize) -> Self {
        Self {
            n_z: 1,
            map: vec![0; n_x],
        }
    }

    fn from_partition(p: &Partition) -> Self {
        Self {
            n_z: p.num_blocks().max(1),
            map: p.block_of().to_vec(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Target {
    Refinement,
    Task(usize),
}

fn check_rows(name: &str, table: &[f64], rows: usize, cols: usize) -> Result<()> {
    if table.len() != rows * cols {
        return Err(Error::contract(format!(
            "{name} has {} entries, expected {rows}×{cols}",
            table.len()
        )));
    }
    for (i, row) in table.chunks(cols).enumerate() {
        if row.iter().any(|&p| !(p >= 0.0) || !p.is_finite()) {
            return Err(Error::contract(format!("{name} row {i} has a negative entry")));
        }
        let sum: f64 = row.iter().sum();
        if (sum - 1.0).abs() > ROW_TOL {
            return Err(Error::contract(format!("{name} row {i} sums to {sum}")));
        }
    }
    Ok(())
}

impl DiscreteSCM {
    pub fn validate(&self) -> Result<()> {
        if [self.n_c, self.n_s, self.n_x, self.n_r].contains(&0) {
            return Err(Error::contract("empty domain"));
        }
        check_rows("P(C)", &self.p_c, 1, self.n_c)?;
        check_rows("P(S)", &self.p_s, 1, self.n_s)?;
        check_rows("P(X|C,S)", &self.p_x, self.n_c * self.n_s, self.n_x)?;
        check_rows("P(Y^R|C)", &self.p_r, self.n_c, self.n_r)?;
        for (t, task) in self.tasks.iter().enumerate() {
            if task.size == 0 {
                return Err(Error::contract(format!("task {t} has an empty domain")));
            }
            check_rows(&format!("P(Y_{t}|Y^R)"), &task.table, self.n_r, task.size)?;
        }
        Ok(())
    }

    fn px(&self, c: usize, s: usize) -> &[f64] {
        let row = c * self.n_s + s;
        &self.p_x[row * self.n_x..(row + 1) * self.n_x]
    }

    fn target_size(&self, target: Target) -> Result<usize> {
        match target {
            Target::Refinement => Ok(self.n_r),
            Target::Task(t) => self
                .tasks
                .get(t)
                .map(|m| m.size)
                .ok_or_else(|| Error::contract(format!("no task {t}"))),
        }
    }

    /// `P(target | C)` as a `|C| × |target|` table.
    fn target_given_c(&self, target: Target) -> Result<Vec<f64>> {
        match target {
            Target::Refinement => Ok(self.p_r.clone()),
            Target::Task(t) => {
                let m = self
                    .tasks
                    .get(t)
                    .ok_or_else(|| Error::contract(format!("no task {t}")))?;
                let mut out = vec![0.0; self.n_c * m.size];
                for c in 0..self.n_c {
                    for r in 0..self.n_r {
                        let pr = self.p_r[c * self.n_r + r];
                        if pr == 0.0 {
                            continue;
                        }
                        for y in 0..m.size {
                            out[c * m.size + y] += pr * m.table[r * m.size + y];
                        }
                    }
                }
                Ok(out)
            }
        }
    }

    /// Builds an SCM whose single task labels the blocks of `partition`.
    #[allow(clippy::too_many_arguments)]
    pub fn with_partition_task(
        n_s: usize,
        p_c: Vec<f64>,
        p_x: Vec<f64>,
        n_x: usize,
        p_r: Vec<f64>,
        partition: &Partition,
        labels: &[usize],
        task_size: usize,
    ) -> Result<Self> {
        let n_c = p_c.len();
        let n_r = partition.ground_size();
        let scm = Self {
            n_c,
            n_s,
            n_x,
            n_r,
            p_c,
            p_s: vec![1.0 / n_s as f64; n_s],
            p_x,
            p_r,
            tasks: vec![TaskMechanism::from_partition(partition, labels, task_size)?].into(),
        };
        scm.validate()?;
        Ok(scm)
    }
}

/// A joint distribution over `(C, X, Y^R, Y_1, …)` under `do(S = s)`.
#[derive(Clone, Debug, PartialEq)]
pub struct Joint {
    pub shape: Vec<usize>,
    pub probs: Vec<f64>,
}

impl Joint {
    pub fn total(&self) -> f64 {
        self.probs.iter().sum()
    }

    /// Conditional `p(target | f(X) = z)` recomputed from the materialised
    /// joint; `None` where `p(z) = 0`.
    pub fn conditional(
        &self,
        f: &RepresentationTable,
        target: Target,
    ) -> Result<Vec<Option<Vec<f64>>>> {
        let axis = match target {
            Target::Refinement => 2,
            Target::Task(t) => 3 + t,
        };
        if axis >= self.shape.len() {
            return Err(Error::contract("target axis missing from joint"));
        }
        let ny = self.shape[axis];
        let mut mass = vec![vec![0.0; ny]; f.n_z];
        let mut idx = vec![0usize; self.shape.len()];
        for &p in &self.probs {
            mass[f.map[idx[1]]][idx[axis]] += p;
            for d in (0..idx.len()).rev() {
                idx[d] += 1;
                if idx[d] < self.shape[d] {
                    break;
                }
                idx[d] = 0;
            }
        }
        Ok(mass
            .into_iter()
            .map(|row| {
                let pz: f64 = row.iter().sum();
                (pz > MASS_EPS).then(|| row.iter().map(|v| v / pz).collect())
            })
            .collect())
    }
}

/// Joint with `P(S)` replaced by a point mass at `s`.
pub fn intervene(scm: &DiscreteSCM, s: usize) -> Result<Joint> {
    if s >= scm.n_s {
        return Err(Error::contract(format!("style {s} outside 0..{}", scm.n_s)));
    }
    let mut shape = vec![scm.n_c, scm.n_x, scm.n_r];
    shape.extend(scm.tasks.iter().map(|t| t.size));
    let total = shape.iter().try_fold(1usize, |a, &d| a.checked_mul(d));
    let total = match total {
        Some(n) if n <= MAX_JOINT => n,
        _ => return Err(Error::contract("joint too large to materialise")),
    };
    let mut probs = Vec::with_capacity(total);
    let mut idx = vec![0usize; shape.len()];
    for _ in 0..total {
        let (c, x, r) = (idx[0], idx[1], idx[2]);
        let mut p = scm.p_c[c] * scm.px(c, s)[x] * scm.p_r[c * scm.n_r + r];
        for (t, task) in scm.tasks.iter().enumerate() {
            p *= task.table[r * task.size + idx[3 + t]];
        }
        probs.push(p);
        for d in (0..idx.len()).rev() {
            idx[d] += 1;
            if idx[d] < shape[d] {
                break;
            }
            idx[d] = 0;
        }
    }
    Ok(Joint { shape, probs })
}

/// `p^{do(S=s)}(target | f(X) = z)` for every `z`, computed by factorising
/// over `C`; `None` where `f(X) = z` has no mass.
pub fn interventional_conditional(
    scm: &DiscreteSCM,
    f: &RepresentationTable,
    target: Target,
    s: usize,
) -> Result<Vec<Option<Vec<f64>>>> {
    if s >= scm.n_s {
        return Err(Error::contract(format!("style {s} outside 0..{}", scm.n_s)));
    }
    check_repr(scm, f)?;
    let ny = scm.target_size(target)?;
    let y_c = scm.target_given_c(target)?;
    Ok(conditional_tables(scm, f, &y_c, ny, s))
}

fn check_repr(scm: &DiscreteSCM, f: &RepresentationTable) -> Result<()> {
    if f.map.len() != scm.n_x || f.map.iter().any(|&z| z >= f.n_z) {
        return Err(Error::contract("representation table does not cover X"));
    }
    Ok(())
}

fn conditional_tables(
    scm: &DiscreteSCM,
    f: &RepresentationTable,
    y_c: &[f64],
    ny: usize,
    s: usize,
) -> Vec<Option<Vec<f64>>> {
    let mut zc = vec![0.0; f.n_z * scm.n_c];
    for c in 0..scm.n_c {
        for (x, &p) in scm.px(c, s).iter().enumerate() {
            zc[f.map[x] * scm.n_c + c] += scm.p_c[c] * p;
        }
    }
    (0..f.n_z)
        .map(|z| {
            let w = &zc[z * scm.n_c..(z + 1) * scm.n_c];
            let pz: f64 = w.iter().sum();
            if pz <= MASS_EPS {
                return None;
            }
            let mut row = vec![0.0; ny];
            for (c, &wc) in w.iter().enumerate() {
                if wc != 0.0 {
                    for (y, v) in row.iter_mut().enumerate() {
                        *v += wc * y_c[c * ny + y];
                    }
                }
            }
            row.iter_mut().for_each(|v| *v /= pz);
            Some(row)
        })
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct InvarianceCheck {
    pub invariant: bool,
    pub max_diff: f64,
    /// `(z, s)` cells with no mass while some other style gives `z` mass.
    pub skipped_cells: usize,
}

fn invariance_from_tables(per_style: &[Vec<Option<Vec<f64>>>], tol: f64) -> InvarianceCheck {
    let n_z = per_style.first().map_or(0, Vec::len);
    let mut max_diff: f64 = 0.0;
    let mut skipped = 0;
    for z in 0..n_z {
        let defined: Vec<&Vec<f64>> = per_style.iter().filter_map(|t| t[z].as_ref()).collect();
        if defined.is_empty() {
            continue;
        }
        skipped += per_style.len() - defined.len();
        for y in 0..defined[0].len() {
            let (lo, hi) = defined
                .iter()
                .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), r| {
                    (lo.min(r[y]), hi.max(r[y]))
                });
            max_diff = max_diff.max(hi - lo);
        }
    }
    InvarianceCheck {
        invariant: max_diff <= tol,
        max_diff,
        skipped_cells: skipped,
    }
}

fn invariance(
    scm: &DiscreteSCM,
    f: &RepresentationTable,
    y_c: &[f64],
    ny: usize,
    tol: f64,
) -> InvarianceCheck {
    let tables: Vec<_> = (0..scm.n_s)
        .map(|s| conditional_tables(scm, f, y_c, ny, s))
        .collect();
    invariance_from_tables(&tables, tol)
}

/// Whether `p^{do(s)}(target | f(X))` is the same for every style `s`.
pub fn check_invariant_representation(
    scm: &DiscreteSCM,
    f: &RepresentationTable,
    target: Target,
    tol: f64,
) -> Result<InvarianceCheck> {
    check_repr(scm, f)?;
    let ny = scm.target_size(target)?;
    let y_c = scm.target_given_c(target)?;
    Ok(invariance(scm, f, &y_c, ny, tol))
}

#[derive(Clone, Debug, PartialEq)]
pub struct Theorem1Report {
    /// Invariance with respect to `Y^R`.
    pub antecedent: bool,
    pub consequent_per_task: Vec<bool>,
    pub skipped_cells: usize,
    /// Serialized model and representation when the implication fails.
    pub counterexample: Option<String>,
}

impl Theorem1Report {
    pub fn violated(&self) -> bool {
        self.antecedent && self.consequent_per_task.iter().any(|c| !c)
    }
}

/// Checks "invariant for `Y^R`" ⇒ "invariant for every task".
pub fn verify_theorem1(
    scm: &DiscreteSCM,
    f: &RepresentationTable,
    tol: f64,
) -> Result<Theorem1Report> {
    let ante = check_invariant_representation(scm, f, Target::Refinement, tol)?;
    let mut skipped = ante.skipped_cells;
    let mut consequents = Vec::with_capacity(scm.tasks.len());
    for t in 0..scm.tasks.len() {
        let c = check_invariant_representation(scm, f, Target::Task(t), tol)?;
        skipped += c.skipped_cells;
        consequents.push(c.invariant);
    }
    let mut report = Theorem1Report {
        antecedent: ante.invariant,
        consequent_per_task: consequents,
        skipped_cells: skipped,
        counterexample: None,
    };
    if report.violated() {
        report.counterexample = Some(serialize_model(scm, f));
    }
    Ok(report)
}

// ---------------------------------------------------------------------------
// Enumeration

/// Upper bounds on domain sizes.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Limits {
    pub content: usize,
    pub style: usize,
    pub observation: usize,
    pub refinement: usize,
    pub task: usize,
    pub codomain: usize,
    /// Tasks attached per fuzzed model.
    pub tasks_per_model: usize,
}

impl Limits {
    /// Sizes the exhaustive quarter-grid sweep can cover in seconds.
    pub fn grid_default() -> Self {
        Self {
            content: 2,
            style: 2,
            observation: 2,
            refinement: 4,
            task: 3,
            codomain: 2,
            tasks_per_model: 0,
        }
    }

    pub fn fuzz_default() -> Self {
        Self {
            content: 3,
            style: 3,
            observation: 6,
            refinement: 4,
            task: 3,
            codomain: 3,
            tasks_per_model: 3,
        }
    }

    fn validate(&self) -> Result<()> {
        let all = [
            self.content,
            self.style,
            self.observation,
            self.refinement,
            self.task,
            self.codomain,
        ];
        if all.contains(&0) {
            return Err(Error::config("enumeration limits must be positive"));
        }
        if self.refinement > 8 || self.observation > 8 {
            return Err(Error::config("refinement and observation limits above 8"));
        }
        Ok(())
    }
}

/// All rows of `k` grid values summing to one.
fn simplex_rows(grid: &[f64], k: usize) -> Vec<Vec<f64>> {
    fn go(grid: &[f64], k: usize, acc: &mut Vec<f64>, sum: f64, out: &mut Vec<Vec<f64>>) {
        if acc.len() == k {
            if (sum - 1.0).abs() <= ROW_TOL {
                out.push(acc.clone());
            }
            return;
        }
        for &g in grid {
            if sum + g > 1.0 + ROW_TOL {
                continue;
            }
            acc.push(g);
            go(grid, k, acc, sum + g, out);
            acc.pop();
        }
    }
    let mut out = Vec::new();
    go(grid, k, &mut Vec::with_capacity(k), 0.0, &mut out);
    out
}

/// The probability grid `{0, 1/q, …, 1}`.
pub fn uniform_grid(q: u32) -> Vec<f64> {
    (0..=q).map(|i| i as f64 / q as f64).collect()
}

#[derive(Clone, Debug)]
struct Shape {
    c: usize,
    s: usize,
    x: usize,
    r: usize,
    start: u64,
    count: u64,
}

/// Deterministic, index-addressable enumeration of every `(SCM, f)` with
/// domains inside `limits` and mechanism rows on `grid`.
///
/// `P(S)` is held uniform since interventions replace it. `f` ranges over
/// canonical surjections (partitions of `X` into at most `codomain` blocks)
/// and each model carries every task obtained by partitioning `Y^R` into at
/// most `task` blocks.
#[derive(Clone, Debug)]
pub struct GridEnumeration {
    rows: Vec<Vec<Vec<f64>>>,
    reprs: Vec<Vec<RepresentationTable>>,
    tasks: Vec<Arc<[TaskMechanism]>>,
    shapes: Vec<Shape>,
    total: u64,
}

impl GridEnumeration {
    pub fn new(limits: &Limits, grid: &[f64]) -> Result<Self> {
        limits.validate()?;
        if grid.iter().any(|g| !(0.0..=1.0).contains(g)) {
            return Err(Error::config("grid values must lie in [0, 1]"));
        }
        let kmax = limits
            .content
            .max(limits.observation)
            .max(limits.refinement);
        let rows: Vec<Vec<Vec<f64>>> = (0..=kmax).map(|k| simplex_rows(grid, k)).collect();
        if rows[1..].iter().any(Vec::is_empty) {
            return Err(Error::config("probability grid cannot form rows summing to 1"));
        }
        let reprs = (0..=limits.observation)
            .map(|x| {
                Partition::all(x)
                    .iter()
                    .filter(|p| p.num_blocks() <= limits.codomain)
                    .map(RepresentationTable::from_partition)
                    .collect()
            })
            .collect();
        let tasks = (0..=limits.refinement)
            .map(|r| {
                Partition::all(r)
                    .iter()
                    .filter(|p| p.num_blocks() <= limits.task)
                    .map(|p| {
                        TaskMechanism::from_partition(
                            p,
                            &(0..p.num_blocks()).collect::<Vec<_>>(),
                            p.num_blocks().max(1),
                        )
                        .expect("canonical labelling")
                    })
                    .collect::<Vec<_>>()
                    .into()
            })
            .collect();
        let mut me = Self {
            rows,
            reprs,
            tasks,
            shapes: Vec::new(),
            total: 0,
        };
        let mut start = 0u64;
        for c in 1..=limits.content {
            for s in 1..=limits.style {
                for x in 1..=limits.observation {
                    for r in 1..=limits.refinement {
                        let n = |k: usize, e: usize| (me.rows[k].len() as u64).checked_pow(e as u32);
                        let count = [
                            n(c, 1),
                            n(x, c * s),
                            n(r, c),
                            Some(me.reprs[x].len() as u64),
                        ]
                        .into_iter()
                        .try_fold(1u64, |a, b| b.and_then(|b| a.checked_mul(b)))
                        .ok_or_else(|| Error::config("grid enumeration overflows u64"))?;
                        me.shapes.push(Shape {
                            c,
                            s,
                            x,
                            r,
                            start,
                            count,
                        });
                        start = start
                            .checked_add(count)
                            .ok_or_else(|| Error::config("grid enumeration overflows u64"))?;
                    }
                }
            }
        }
        me.total = start;
        Ok(me)
    }

    pub fn len(&self) -> u64 {
        self.total
    }

    pub fn is_empty(&self) -> bool {
        self.total == 0
    }

    /// Model number `index` in enumeration order.
    pub fn get(&self, index: u64) -> Option<(DiscreteSCM, RepresentationTable)> {
        if index >= self.total {
            return None;
        }
        let sh = &self.shapes[self.shapes.partition_point(|s| s.start + s.count <= index)];
        let mut rem = index - sh.start;
        let mut take = |radix: usize| {
            let d = (rem % radix as u64) as usize;
            rem /= radix as u64;
            d
        };
        let f = self.reprs[sh.x][take(self.reprs[sh.x].len())].clone();
        let mut p_r = Vec::with_capacity(sh.c * sh.r);
        for _ in 0..sh.c {
            p_r.extend_from_slice(&self.rows[sh.r][take(self.rows[sh.r].len())]);
        }
        let mut p_x = Vec::with_capacity(sh.c * sh.s * sh.x);
        for _ in 0..sh.c * sh.s {
            p_x.extend_from_slice(&self.rows[sh.x][take(self.rows[sh.x].len())]);
        }
        let p_c = self.rows[sh.c][take(self.rows[sh.c].len())].clone();
        let scm = DiscreteSCM {
            n_c: sh.c,
            n_s: sh.s,
            n_x: sh.x,
            n_r: sh.r,
            p_c,
            p_s: vec![1.0 / sh.s as f64; sh.s],
            p_x,
            p_r,
            tasks: self.tasks[sh.r].clone(),
        };
        Some((scm, f))
    }

    pub fn iter(&self) -> impl Iterator<Item = (DiscreteSCM, RepresentationTable)> + '_ {
        (0..self.total).map(move |i| self.get(i).expect("index in range"))
    }
}

/// Seeded random models drawn at the given limits.
///
/// A third of the models have a style-free `X` mechanism and another third
/// make content recoverable from `X`, so the antecedent of the implication is
/// exercised often rather than almost never.
pub struct Fuzzer {
    limits: Limits,
    seed: u64,
}

impl Fuzzer {
    pub fn new(limits: Limits, seed: u64) -> Result<Self> {
        limits.validate()?;
        if limits.tasks_per_model == 0 {
            return Err(Error::config("fuzzing needs at least one task per model"));
        }
        Ok(Self { limits, seed })
    }

    pub fn get(&self, index: u64) -> (DiscreteSCM, RepresentationTable) {
        let mut rng = stream(&[self.seed, 0xF022, index]);
        let l = &self.limits;
        let kind = rng.random_range(0..3u8);
        let n_c = rng.random_range(1..=l.content);
        let n_s = rng.random_range(1..=l.style);
        let n_r = rng.random_range(1..=l.refinement);
        let p_c = random_row(&mut rng, n_c);
        let p_s = random_row(&mut rng, n_s);
        let p_r: Vec<f64> = (0..n_c).flat_map(|_| random_row(&mut rng, n_r)).collect();

        let (n_x, p_x, f) = match kind {
            // style-free observation mechanism
            0 => {
                let n_x = rng.random_range(1..=l.observation);
                let rows: Vec<Vec<f64>> = (0..n_c).map(|_| random_row(&mut rng, n_x)).collect();
                let p_x = (0..n_c)
                    .flat_map(|c| (0..n_s).flat_map(|_| rows[c].clone()).collect::<Vec<_>>())
                    .collect();
                (n_x, p_x, random_repr(&mut rng, n_x, l.codomain))
            }
            // X carries content in its block index, style in the offset
            1 => {
                let per = (l.observation / n_c).max(1);
                let n_x = n_c * per;
                let mut p_x = vec![0.0; n_c * n_s * n_x];
                for c in 0..n_c {
                    for s in 0..n_s {
                        let row = random_row(&mut rng, per);
                        let base = (c * n_s + s) * n_x + c * per;
                        p_x[base..base + per].copy_from_slice(&row);
                    }
                }
                // f reads the content block, possibly merging blocks
                let merge = random_partition(&mut rng, n_c, l.codomain);
                let map = (0..n_x).map(|x| merge.block_of()[x / per]).collect();
                (n_x, p_x, RepresentationTable { n_z: merge.num_blocks(), map })
            }
            _ => {
                let n_x = rng.random_range(1..=l.observation);
                let p_x = (0..n_c * n_s).flat_map(|_| random_row(&mut rng, n_x)).collect();
                (n_x, p_x, random_repr(&mut rng, n_x, l.codomain))
            }
        };

        let n_tasks = rng.random_range(1..=l.tasks_per_model);
        let tasks: Vec<TaskMechanism> = (0..n_tasks)
            .map(|_| {
                let part = random_partition(&mut rng, n_r, l.task);
                let size = rng.random_range(part.num_blocks()..=l.task.max(part.num_blocks()));
                let labels: Vec<usize> = (0..part.num_blocks())
                    .map(|_| rng.random_range(0..size))
                    .collect();
                TaskMechanism::from_partition(&part, &labels, size).expect("labels in range")
            })
            .collect();
        let scm = DiscreteSCM {
            n_c,
            n_s,
            n_x,
            n_r,
            p_c,
            p_s,
            p_x,
            p_r,
            tasks: tasks.into(),
        };
        (scm, f)
    }
}

/// Random simplex row; about a quarter of entries are forced to zero.
fn random_row(rng: &mut Rng, k: usize) -> Vec<f64> {
    let mut row: Vec<f64> = (0..k)
        .map(|_| {
            if rng.random_bool(0.25) {
                0.0
            } else {
                -rng.random::<f64>().max(f64::MIN_POSITIVE).ln()
            }
        })
        .collect();
    let sum: f64 = row.iter().sum();
    if sum == 0.0 {
        row[rng.random_range(0..k)] = 1.0;
        return row;
    }
    row.iter_mut().for_each(|v| *v /= sum);
    // Absorb rounding so the row sums to one within the validation tolerance.
    let err = 1.0 - row.iter().sum::<f64>();
    if let Some(m) = row.iter_mut().max_by(|a, b| a.total_cmp(b)) {
        *m += err;
    }
    row
}

fn random_partition(rng: &mut Rng, n: usize, max_blocks: usize) -> Partition {
    let labels: Vec<usize> = (0..n).map(|_| rng.random_range(0..max_blocks)).collect();
    Partition::from_labels(&labels)
}

fn random_repr(rng: &mut Rng, n_x: usize, codomain: usize) -> RepresentationTable {
    RepresentationTable::from_partition(&random_partition(rng, n_x, codomain))
}

/// Stream of models: the exhaustive grid over `grid` values, or `count`
/// fuzzed models from `(seed, count)`.
pub fn enumerate_scms(
    limits: &Limits,
    grid: Option<&[f64]>,
    fuzz: Option<(u64, u64)>,
) -> Result<Box<dyn Iterator<Item = (DiscreteSCM, RepresentationTable)>>> {
    match (grid, fuzz) {
        (Some(g), None) => {
            let e = GridEnumeration::new(limits, g)?;
            Ok(Box::new((0..e.len()).map(move |i| e.get(i).expect("in range"))))
        }
        (None, Some((seed, count))) => {
            let fz = Fuzzer::new(limits.clone(), seed)?;
            Ok(Box::new((0..count).map(move |i| fz.get(i))))
        }
        _ => Err(Error::config("choose exactly one of grid or fuzz mode")),
    }
}

/// Aggregate of an implication sweep; merging shard summaries is associative.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct SweepSummary {
    pub models: u64,
    pub antecedent_true: u64,
    pub violations: u64,
    pub skipped_cells: u64,
    /// Lowest-index counterexample, serialized.
    pub first_counterexample: Option<(u64, String)>,
}

impl SweepSummary {
    fn add(&mut self, index: u64, scm: &DiscreteSCM, f: &RepresentationTable, tol: f64) {
        self.models += 1;
        let ante = match check_invariant_representation(scm, f, Target::Refinement, tol) {
            Ok(a) => a,
            Err(e) => {
                self.record(index, format!("invalid model: {e}\n{}", serialize_model(scm, f)));
                return;
            }
        };
        self.skipped_cells += ante.skipped_cells as u64;
        if !ante.invariant {
            return;
        }
        self.antecedent_true += 1;
        for t in 0..scm.tasks.len() {
            let c = check_invariant_representation(scm, f, Target::Task(t), tol)
                .expect("task index in range");
            self.skipped_cells += c.skipped_cells as u64;
            if !c.invariant {
                self.record(index, serialize_model(scm, f));
                return;
            }
        }
    }

    fn record(&mut self, index: u64, text: String) {
        self.violations += 1;
        if self.first_counterexample.as_ref().is_none_or(|(i, _)| index < *i) {
            self.first_counterexample = Some((index, text));
        }
    }

    pub fn merge(mut self, other: Self) -> Self {
        self.models += other.models;
        self.antecedent_true += other.antecedent_true;
        self.violations += other.violations;
        self.skipped_cells += other.skipped_cells;
        if let Some((i, t)) = other.first_counterexample {
            if self.first_counterexample.as_ref().is_none_or(|(j, _)| i < *j) {
                self.first_counterexample = Some((i, t));
            }
        }
        self
    }
}

fn sweep<F>(range: Range<u64>, tol: f64, parallel: bool, get: F) -> SweepSummary
where
    F: Fn(u64) -> (DiscreteSCM, RepresentationTable) + Sync,
{
    const CHUNK: u64 = 4096;
    let chunk = |lo: u64| {
        let mut s = SweepSummary::default();
        for i in lo..(lo + CHUNK).min(range.end) {
            let (scm, f) = get(i);
            s.add(i, &scm, &f, tol);
        }
        s
    };
    let starts = (range.start..range.end).step_by(CHUNK as usize);
    if parallel {
        starts
            .collect::<Vec<_>>()
            .into_par_iter()
            .map(chunk)
            .reduce(SweepSummary::default, SweepSummary::merge)
    } else {
        starts.map(chunk).fold(SweepSummary::default(), SweepSummary::merge)
    }
}

/// Checks the implication on grid models `range`.
pub fn sweep_grid(e: &GridEnumeration, range: Range<u64>, tol: f64, parallel: bool) -> SweepSummary {
    let range = range.start.min(e.len())..range.end.min(e.len());
    sweep(range, tol, parallel, |i| e.get(i).expect("in range"))
}

/// Checks the implication on fuzzed models `range`.
pub fn sweep_fuzz(fz: &Fuzzer, range: Range<u64>, tol: f64, parallel: bool) -> SweepSummary {
    sweep(range, tol, parallel, |i| fz.get(i))
}

// ---------------------------------------------------------------------------
// Text form

fn write_row(out: &mut String, key: &str, v: &[f64]) {
    out.push_str(key);
    for p in v {
        let _ = write!(out, " {p}");
    }
    out.push('\n');
}

/// Structured text block holding the model and representation.
pub fn serialize_model(scm: &DiscreteSCM, f: &RepresentationTable) -> String {
    let mut out = String::from("scm 1\n");
    let sizes: Vec<String> = scm.tasks.iter().map(|t| t.size.to_string()).collect();
    let _ = writeln!(
        out,
        "domains {} {} {} {} tasks {}",
        scm.n_c,
        scm.n_s,
        scm.n_x,
        scm.n_r,
        sizes.join(",")
    );
    write_row(&mut out, "p_c", &scm.p_c);
    write_row(&mut out, "p_s", &scm.p_s);
    write_row(&mut out, "p_x", &scm.p_x);
    write_row(&mut out, "p_r", &scm.p_r);
    for (t, task) in scm.tasks.iter().enumerate() {
        write_row(&mut out, &format!("task{t}"), &task.table);
    }
    let _ = write!(out, "f {}", f.n_z);
    for z in &f.map {
        let _ = write!(out, " {z}");
    }
    out.push('\n');
    out
}

pub fn parse_model(text: &str) -> Result<(DiscreteSCM, RepresentationTable)> {
    let mut lines = text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty());
    let mut next = |key: &str| -> Result<(usize, Vec<String>)> {
        let (n, line) = lines
            .next()
            .ok_or_else(|| Error::format(0, format!("missing `{key}` line")))?;
        let mut words = line.split_whitespace();
        if words.next() != Some(key) {
            return Err(Error::format(n as u64, format!("expected `{key}`")));
        }
        Ok((n, words.map(str::to_string).collect()))
    };
    let bad = |n: usize, what: &str| Error::format(n as u64, format!("malformed {what}"));
    let (n, v) = next("scm")?;
    if v != ["1"] {
        return Err(bad(n, "version"));
    }
    let (n, d) = next("domains")?;
    if d.len() < 5 || d[4] != "tasks" {
        return Err(bad(n, "domains"));
    }
    let dims: Vec<usize> = d[..4]
        .iter()
        .map(|w| w.parse().map_err(|_| bad(n, "domains")))
        .collect::<Result<_>>()?;
    let task_sizes: Vec<usize> = match d.get(5) {
        Some(s) => s
            .split(',')
            .map(|w| w.parse().map_err(|_| bad(n, "task sizes")))
            .collect::<Result<_>>()?,
        None => Vec::new(),
    };
    let floats = |(n, v): (usize, Vec<String>), what: &str| -> Result<Vec<f64>> {
        v.iter()
            .map(|w| w.parse::<f64>().map_err(|_| bad(n, what)))
            .collect()
    };
    let p_c = floats(next("p_c")?, "p_c")?;
    let p_s = floats(next("p_s")?, "p_s")?;
    let p_x = floats(next("p_x")?, "p_x")?;
    let p_r = floats(next("p_r")?, "p_r")?;
    let mut tasks = Vec::new();
    for (t, &size) in task_sizes.iter().enumerate() {
        let key = format!("task{t}");
        tasks.push(TaskMechanism {
            size,
            table: floats(next(&key)?, &key)?,
        });
    }
    let (n, fw) = next("f")?;
    let nums: Vec<usize> = fw
        .iter()
        .map(|w| w.parse().map_err(|_| bad(n, "f")))
        .collect::<Result<_>>()?;
    let (&n_z, map) = nums.split_first().ok_or_else(|| bad(n, "f"))?;
    let scm = DiscreteSCM {
        n_c: dims[0],
        n_s: dims[1],
        n_x: dims[2],
        n_r: dims[3],
        p_c,
        p_s,
        p_x,
        p_r,
        tasks: tasks.into(),
    };
    scm.validate()?;
    let f = RepresentationTable::new(n_z, map.to_vec())?;
    check_repr(&scm, &f)?;
    Ok((scm, f))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn two_by_two(p_x: Vec<f64>, p_r: Vec<f64>, n_x: usize) -> DiscreteSCM {
        DiscreteSCM {
            n_c: 2,
            n_s: 2,
            n_x,
            n_r: p_r.len() / 2,
            p_c: vec![0.5, 0.5],
            p_s: vec![0.5, 0.5],
            p_x,
            p_r: p_r.clone(),
            tasks: vec![TaskMechanism::identity(p_r.len() / 2)].into(),
        }
    }

    #[test]
    fn single_style_intervention_is_observational() {
        let scm = DiscreteSCM {
            n_c: 2,
            n_s: 1,
            n_x: 2,
            n_r: 2,
            p_c: vec![0.25, 0.75],
            p_s: vec![1.0],
            p_x: vec![0.5, 0.5, 0.0, 1.0],
            p_r: vec![1.0, 0.0, 0.25, 0.75],
            tasks: Arc::from(Vec::new()),
        };
        scm.validate().unwrap();
        let j = intervene(&scm, 0).unwrap();
        assert!((j.total() - 1.0).abs() < 1e-12);
        // observational p(c, x, r) with P(S=0) = 1
        assert_eq!(j.probs[0], 0.25 * 0.5 * 1.0);
        assert!(intervene(&scm, 1).is_err());
    }

    #[test]
    fn style_free_generation_gives_equal_joints() {
        let scm = two_by_two(vec![0.5, 0.5, 0.5, 0.5, 0.25, 0.75, 0.25, 0.75], vec![1.0, 0.0, 0.0, 1.0], 2);
        assert_eq!(intervene(&scm, 0).unwrap(), intervene(&scm, 1).unwrap());
    }

    #[test]
    fn constant_f_with_independent_target() {
        let scm = two_by_two(
            vec![1.0, 0.0, 0.0, 1.0, 0.5, 0.5, 0.25, 0.75],
            vec![0.5, 0.5, 0.5, 0.5],
            2,
        );
        let c = check_invariant_representation(&scm, &RepresentationTable::constant(2), Target::Refinement, 1e-9)
            .unwrap();
        assert!(c.invariant);
    }

    #[test]
    fn content_representation_is_invariant() {
        // X = (c, s) encoded as 2c + s
        let p_x = vec![
            1.0, 0.0, 0.0, 0.0, //
            0.0, 1.0, 0.0, 0.0, //
            0.0, 0.0, 1.0, 0.0, //
            0.0, 0.0, 0.0, 1.0,
        ];
        let scm = two_by_two(p_x, vec![0.75, 0.25, 0.0, 1.0], 4);
        let f = RepresentationTable::new(2, vec![0, 0, 1, 1]).unwrap();
        let r = verify_theorem1(&scm, &f, 1e-9).unwrap();
        assert!(r.antecedent && r.consequent_per_task.iter().all(|&c| c));
    }

    #[test]
    fn style_entangled_representation_is_not_invariant() {
        // X = 2·(c xor s) + s and f keeps only c xor s: under each style the
        // same z points at a different content value.
        let mut p_x = vec![0.0; 16];
        for c in 0..2 {
            for s in 0..2 {
                p_x[(c * 2 + s) * 4 + 2 * (c ^ s) + s] = 1.0;
            }
        }
        let scm = two_by_two(p_x, vec![1.0, 0.0, 0.25, 0.75], 4);
        let f = RepresentationTable::new(2, vec![0, 0, 1, 1]).unwrap();
        let c = check_invariant_representation(&scm, &f, Target::Refinement, 1e-9).unwrap();
        assert!(!c.invariant);
        assert!((c.max_diff - 0.75).abs() < 1e-12);
        // reading S alone leaves every cell defined under one style only
        let g = RepresentationTable::new(2, vec![0, 1, 0, 1]).unwrap();
        let c = check_invariant_representation(&scm, &g, Target::Refinement, 1e-9).unwrap();
        assert!(c.invariant);
        assert_eq!(c.skipped_cells, 2);
    }

    #[test]
    fn joint_and_factored_routes_agree() {
        let fz = Fuzzer::new(Limits::fuzz_default(), 3).unwrap();
        for i in 0..200 {
            let (scm, f) = fz.get(i);
            scm.validate().unwrap();
            for s in 0..scm.n_s {
                let joint = intervene(&scm, s).unwrap();
                assert!((joint.total() - 1.0).abs() < 1e-10);
                let targets = std::iter::once(Target::Refinement)
                    .chain((0..scm.tasks.len()).map(Target::Task));
                for t in targets {
                    let a = joint.conditional(&f, t).unwrap();
                    let b = interventional_conditional(&scm, &f, t, s).unwrap();
                    for (ra, rb) in a.iter().zip(&b) {
                        match (ra, rb) {
                            (Some(ra), Some(rb)) => {
                                for (x, y) in ra.iter().zip(rb) {
                                    assert!((x - y).abs() < 1e-12);
                                }
                            }
                            (None, None) => {}
                            _ => panic!("definedness differs"),
                        }
                    }
                }
            }
        }
    }

    #[test]
    fn identity_task_implication() {
        let fz = Fuzzer::new(Limits::fuzz_default(), 5).unwrap();
        for i in 0..100 {
            let (mut scm, f) = fz.get(i);
            scm.tasks = vec![TaskMechanism::identity(scm.n_r)].into();
            let r = verify_theorem1(&scm, &f, 1e-9).unwrap();
            assert_eq!(r.antecedent, r.consequent_per_task[0]);
        }
    }

    #[test]
    fn singleton_limits_emit_one_model() {
        let l = Limits {
            content: 1,
            style: 1,
            observation: 1,
            refinement: 1,
            task: 1,
            codomain: 1,
            tasks_per_model: 0,
        };
        let models: Vec<_> = enumerate_scms(&l, Some(&uniform_grid(4)), None).unwrap().collect();
        assert_eq!(models.len(), 1);
        models[0].0.validate().unwrap();
    }

    #[test]
    fn deterministic_grid_has_only_point_masses() {
        let l = Limits {
            content: 1,
            style: 1,
            observation: 1,
            refinement: 2,
            task: 2,
            codomain: 1,
            tasks_per_model: 0,
        };
        let e = GridEnumeration::new(&l, &[0.0, 1.0]).unwrap();
        for (scm, _) in e.iter() {
            assert!(scm.p_r.iter().all(|&p| p == 0.0 || p == 1.0));
        }
        assert_eq!(e.len(), 1 + 2);
    }

    #[test]
    fn infeasible_grid_is_config_error() {
        assert!(matches!(
            GridEnumeration::new(&Limits::grid_default(), &[0.3]),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn fuzz_stream_is_reproducible() {
        let a: Vec<_> = enumerate_scms(&Limits::fuzz_default(), None, Some((9, 50))).unwrap().collect();
        let b: Vec<_> = enumerate_scms(&Limits::fuzz_default(), None, Some((9, 50))).unwrap().collect();
        assert_eq!(a, b);
    }

    #[test]
    fn sharded_sweep_matches_whole() {
        let mut l = Limits::grid_default();
        l.refinement = 2;
        let e = GridEnumeration::new(&l, &uniform_grid(4)).unwrap();
        let whole = sweep_grid(&e, 0..e.len(), 1e-9, false);
        let mid = e.len() / 3;
        let parts = sweep_grid(&e, 0..mid, 1e-9, true).merge(sweep_grid(&e, mid..e.len(), 1e-9, true));
        assert_eq!(whole, parts);
        assert_eq!(whole.models, e.len());
        assert_eq!(whole.violations, 0);
        assert!(whole.antecedent_true > 0);
    }

    #[test]
    fn text_round_trip() {
        let fz = Fuzzer::new(Limits::fuzz_default(), 1).unwrap();
        for i in 0..20 {
            let (scm, f) = fz.get(i);
            let (scm2, f2) = parse_model(&serialize_model(&scm, &f)).unwrap();
            assert_eq!(scm, scm2);
            assert_eq!(f, f2);
        }
        assert!(parse_model("scm 2\n").is_err());
    }

    #[test]
    fn partition_constructor() {
        let part = Partition::from_labels(&[0, 0, 1]);
        let scm = DiscreteSCM::with_partition_task(
            2,
            vec![0.5, 0.5],
            vec![1.0, 0.0, 0.5, 0.5, 0.0, 1.0, 0.5, 0.5],
            2,
            vec![0.5, 0.5, 0.0, 0.0, 0.0, 1.0],
            &part,
            &[1, 0],
            2,
        )
        .unwrap();
        assert_eq!(scm.tasks[0].table, vec![0.0, 1.0, 0.0, 1.0, 1.0, 0.0]);
    }
}
