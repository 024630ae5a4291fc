//! Truncated variational E-step: search spaces, K-set and neighborhood
//! updates, hard partition, divergence estimates and responsibilities.

use std::cmp::Ordering;
use std::collections::HashMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::dataset::Dataset;
use crate::error::{MfaError, Result};
use crate::model::{log_sum_exp, ComponentCache, Counter, MfaParams};

/// Which similarity estimate ranks the neighborhood sets.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum DistanceMode {
    /// Sample estimate of the KL divergence between component densities.
    #[default]
    Kl,
    /// Mean negative log-joint of the candidate over the cell's points.
    Euclid,
}

/// Variational parameters: truncation sets per point, neighborhood sets per
/// component and the hard labels of the last E-step.
#[derive(Debug, Clone, PartialEq)]
pub struct VarState {
    n_components: usize,
    cprime: usize,
    gsize: usize,
    k_sets: Vec<u32>,
    g_sets: Vec<Vec<u32>>,
    labels: Vec<u32>,
}

impl VarState {
    /// `k_sets` is the flat `N x C'` table. Labels start at each point's first
    /// K entry.
    pub fn new(
        n_components: usize,
        cprime: usize,
        gsize: usize,
        k_sets: Vec<u32>,
        g_sets: Vec<Vec<u32>>,
    ) -> Result<Self> {
        if cprime == 0 || cprime > n_components {
            return Err(MfaError::InvalidConfig(format!(
                "C' must lie in [1, {n_components}], got {cprime}"
            )));
        }
        if gsize == 0 || gsize > n_components {
            return Err(MfaError::InvalidConfig(format!(
                "G must lie in [1, {n_components}], got {gsize}"
            )));
        }
        if k_sets.is_empty() || !k_sets.len().is_multiple_of(cprime) {
            return Err(MfaError::InvalidConfig(format!(
                "K table of length {} is not a positive multiple of C'={cprime}",
                k_sets.len()
            )));
        }
        let labels = k_sets.chunks_exact(cprime).map(|k| k[0]).collect();
        let s = Self {
            n_components,
            cprime,
            gsize,
            k_sets,
            g_sets,
            labels,
        };
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<()> {
        let c = self.n_components;
        let mut seen = vec![usize::MAX; c];
        for (n, k) in self.k_sets.chunks_exact(self.cprime).enumerate() {
            for &i in k {
                let i = i as usize;
                if i >= c || seen[i] == n {
                    return Err(MfaError::InvalidConfig(format!(
                        "K set of point {n} has an invalid or repeated index {i}"
                    )));
                }
                seen[i] = n;
            }
        }
        if self.g_sets.len() != c {
            return Err(MfaError::DimensionMismatch {
                expected: c,
                found: self.g_sets.len(),
            });
        }
        let mut seen = vec![usize::MAX; c];
        for (ci, g) in self.g_sets.iter().enumerate() {
            if g.len() > self.gsize || !g.contains(&(ci as u32)) {
                return Err(MfaError::InvalidConfig(format!(
                    "neighborhood of component {ci} must contain it and hold at most G entries"
                )));
            }
            for &i in g {
                let i = i as usize;
                if i >= c || seen[i] == ci {
                    return Err(MfaError::InvalidConfig(format!(
                        "neighborhood of component {ci} has an invalid or repeated index {i}"
                    )));
                }
                seen[i] = ci;
            }
        }
        Ok(())
    }

    #[inline]
    pub fn n(&self) -> usize {
        self.labels.len()
    }

    #[inline]
    pub fn n_components(&self) -> usize {
        self.n_components
    }

    #[inline]
    pub fn cprime(&self) -> usize {
        self.cprime
    }

    #[inline]
    pub fn gsize(&self) -> usize {
        self.gsize
    }

    #[inline]
    pub fn k_set(&self, n: usize) -> &[u32] {
        &self.k_sets[n * self.cprime..(n + 1) * self.cprime]
    }

    /// Flat `N x C'` table of truncation sets.
    pub fn k_table(&self) -> &[u32] {
        &self.k_sets
    }

    pub fn k_lists(&self) -> Vec<&[u32]> {
        self.k_sets.chunks_exact(self.cprime).collect()
    }

    #[inline]
    pub fn g_set(&self, c: usize) -> &[u32] {
        &self.g_sets[c]
    }

    pub fn g_sets(&self) -> &[Vec<u32>] {
        &self.g_sets
    }

    /// Hard assignment of each point from the latest E-step.
    pub fn labels(&self) -> &[u32] {
        &self.labels
    }

    pub fn partition(&self) -> Vec<Vec<u32>> {
        partition_from_labels(&self.labels, self.n_components)
    }

    /// Replaces the truncation set of point `n`. Used by tests and tools that
    /// manipulate K directly.
    pub fn set_k(&mut self, n: usize, k: &[u32]) -> Result<()> {
        if k.len() != self.cprime {
            return Err(MfaError::DimensionMismatch {
                expected: self.cprime,
                found: k.len(),
            });
        }
        self.k_sets[n * self.cprime..(n + 1) * self.cprime].copy_from_slice(k);
        Ok(())
    }

    pub fn set_g(&mut self, c: usize, g: Vec<u32>) {
        self.g_sets[c] = g;
    }
}

/// Per-worker scratch marking components already placed in a search space.
struct Marks {
    stamp: Vec<u32>,
    gen: u32,
}

impl Marks {
    fn new(c: usize) -> Self {
        Self {
            stamp: vec![0; c],
            gen: 0,
        }
    }

    fn reset(&mut self) {
        self.gen = self.gen.wrapping_add(1);
        if self.gen == 0 {
            self.stamp.fill(0);
            self.gen = 1;
        }
    }

    #[inline]
    fn insert(&mut self, c: u32) -> bool {
        let s = &mut self.stamp[c as usize];
        if *s == self.gen {
            false
        } else {
            *s = self.gen;
            true
        }
    }
}

fn search_space_into(
    state: &VarState,
    n: usize,
    extra: u32,
    marks: &mut Marks,
    out: &mut Vec<u32>,
) {
    out.clear();
    marks.reset();
    for &c in state.k_set(n) {
        for &g in &state.g_sets[c as usize] {
            if marks.insert(g) {
                out.push(g);
            }
        }
    }
    if marks.insert(extra) {
        out.push(extra);
    }
}

/// Uniform extra candidate for point `n` in the E-step identified by `key`.
pub fn draw_extra(key: u64, n: usize, n_components: usize) -> u32 {
    let mut rng = ChaCha8Rng::seed_from_u64(key);
    rng.set_stream(n as u64);
    rng.random_range(0..n_components as u32)
}

/// Search space of point `n`: the union of the neighborhoods of its K set in
/// visiting order, followed by `extra` when it is not already present.
pub fn build_search_space(state: &VarState, n: usize, extra: u32) -> Vec<u32> {
    let mut marks = Marks::new(state.n_components);
    let mut out = Vec::new();
    search_space_into(state, n, extra, &mut marks, &mut out);
    out
}

#[inline]
fn by_joint_desc(a: (u32, f64), b: (u32, f64)) -> Ordering {
    b.1.partial_cmp(&a.1)
        .unwrap_or(Ordering::Equal)
        .then(a.0.cmp(&b.0))
}

/// The `cprime` candidates with the largest log-joints, best first; ties go
/// to the smaller component index.
pub fn update_k(candidates: &[(u32, f64)], cprime: usize) -> Result<Vec<u32>> {
    if candidates.len() < cprime {
        return Err(MfaError::InsufficientCandidates {
            available: candidates.len(),
            required: cprime,
        });
    }
    let mut sorted = candidates.to_vec();
    sorted.sort_by(|&a, &b| by_joint_desc(a, b));
    Ok(sorted[..cprime].iter().map(|&(c, _)| c).collect())
}

/// Index of the largest joint in `k`; ties go to the smaller component.
pub fn hard_label(k: &[u32], joints: &[f64]) -> u32 {
    let mut best = 0;
    for i in 1..k.len() {
        if by_joint_desc((k[i], joints[i]), (k[best], joints[best])) == Ordering::Less {
            best = i;
        }
    }
    k[best]
}

/// Cells `I_c` as ascending point lists.
pub fn partition_from_labels(labels: &[u32], n_components: usize) -> Vec<Vec<u32>> {
    let mut cells = vec![Vec::new(); n_components];
    for (n, &c) in labels.iter().enumerate() {
        cells[c as usize].push(n as u32);
    }
    cells
}

/// Normalized truncated posteriors over the joints of one K set.
pub fn responsibilities(joints: &[f64]) -> Vec<f64> {
    let mut q = vec![0.0; joints.len()];
    normalize_into(joints, &mut q);
    q
}

#[inline]
fn normalize_into(joints: &[f64], q: &mut [f64]) -> f64 {
    let lse = log_sum_exp(joints);
    for (qi, &j) in q.iter_mut().zip(joints) {
        *qi = (j - lse).exp();
    }
    lse
}

/// Log-joints evaluated in block 1, kept per point for reuse.
#[derive(Debug, Clone)]
pub struct SearchJoints {
    stride: usize,
    idx: Vec<u32>,
    joints: Vec<f64>,
    len: Vec<u32>,
}

impl SearchJoints {
    fn new(n: usize, stride: usize) -> Self {
        Self {
            stride,
            idx: vec![0; n * stride],
            joints: vec![0.0; n * stride],
            len: vec![0; n],
        }
    }

    /// Components and log-joints of the search space of point `n`.
    pub fn get(&self, n: usize) -> (&[u32], &[f64]) {
        let (a, l) = (n * self.stride, self.len[n] as usize);
        (&self.idx[a..a + l], &self.joints[a..a + l])
    }

    pub fn n(&self) -> usize {
        self.len.len()
    }

    pub fn total(&self) -> u64 {
        self.len.iter().map(|&l| l as u64).sum()
    }
}

/// Running sums `(sum of log-ratios, sample count)` keyed by candidate, one
/// map per component.
#[derive(Debug, Clone, Default)]
pub struct DistanceAccumulator {
    pub maps: Vec<HashMap<u32, (f64, u32)>>,
}

impl DistanceAccumulator {
    /// Averaged estimate for the pair, `None` when no sample was collected.
    pub fn estimate(&self, c: usize, other: u32) -> Option<f64> {
        self.maps[c].get(&other).map(|&(s, k)| s / k as f64)
    }
}

/// Block 3 accumulation over retained joints only.
///
/// For every `n` in cell `c` and every other live candidate of its search
/// space, adds the log-ratio of conditional densities (kl) or the negative
/// candidate log-joint (euclid).
pub fn accumulate_distances(
    partition: &[Vec<u32>],
    search: &SearchJoints,
    log_pi: &[f64],
    mode: DistanceMode,
) -> DistanceAccumulator {
    let maps = partition
        .par_iter()
        .enumerate()
        .map(|(c, cell)| {
            let mut map: HashMap<u32, (f64, u32)> = HashMap::new();
            let c32 = c as u32;
            for &n in cell {
                let (idx, lj) = search.get(n as usize);
                let Some(pos) = idx.iter().position(|&i| i == c32) else {
                    continue;
                };
                let own = lj[pos] - log_pi[c];
                for (&other, &l) in idx.iter().zip(lj) {
                    if other == c32 || l == f64::NEG_INFINITY {
                        continue;
                    }
                    let value = match mode {
                        DistanceMode::Kl => own - (l - log_pi[other as usize]),
                        DistanceMode::Euclid => -l,
                    };
                    let e = map.entry(other).or_insert((0.0, 0));
                    e.0 += value;
                    e.1 += 1;
                }
            }
            map
        })
        .collect();
    DistanceAccumulator { maps }
}

/// `{c}` followed by the `gsize - 1` candidates with the smallest averaged
/// estimates; unseen candidates never enter.
pub fn update_g(acc: &DistanceAccumulator, c: usize, gsize: usize) -> Vec<u32> {
    let mut ranked: Vec<(u32, f64)> = acc.maps[c]
        .iter()
        .map(|(&k, &(s, cnt))| (k, s / cnt as f64))
        .collect();
    ranked.sort_by(|a, b| {
        a.1.partial_cmp(&b.1)
            .unwrap_or(Ordering::Equal)
            .then(a.0.cmp(&b.0))
    });
    let mut g = Vec::with_capacity(gsize);
    g.push(c as u32);
    g.extend(ranked.iter().take(gsize.saturating_sub(1)).map(|&(k, _)| k));
    g
}

/// Everything an E-step hands to the M-step and the instrumentation.
#[derive(Debug, Clone)]
pub struct EStepOutput {
    /// `N x C'` truncated posteriors aligned with the new K table.
    pub q: Vec<f64>,
    /// `N x C'` log-joints aligned with the new K table.
    pub k_joints: Vec<f64>,
    /// Truncated free energy under the K sets before the step.
    pub free_energy_before: f64,
    /// Truncated free energy under the updated K sets.
    pub free_energy: f64,
    pub joint_evals: u64,
    pub search: SearchJoints,
    pub accumulator: DistanceAccumulator,
}

/// One variational E-step at fixed parameters.
///
/// `key` identifies the step; the extra uniform candidate of point `n` is
/// drawn from a stream keyed by `(key, n)` so results do not depend on
/// thread scheduling.
pub fn variational_e_step(
    params: &MfaParams,
    caches: &[ComponentCache],
    data: &Dataset,
    state: &mut VarState,
    key: u64,
    mode: DistanceMode,
    counter: &Counter,
) -> Result<EStepOutput> {
    let (n_pts, c_count, cp) = (data.n(), params.n_components(), state.cprime);
    if state.n() != n_pts {
        return Err(MfaError::DimensionMismatch {
            expected: n_pts,
            found: state.n(),
        });
    }
    if state.n_components != c_count {
        return Err(MfaError::DimensionMismatch {
            expected: c_count,
            found: state.n_components,
        });
    }
    let stride = (cp * state.gsize + 1).min(c_count);
    let mut search = SearchJoints::new(n_pts, stride);
    let mut new_k = vec![0u32; n_pts * cp];
    let mut k_joints = vec![0.0; n_pts * cp];
    let shared: &VarState = state;

    // Block 1: search spaces, joints, K update.
    let per_point: Vec<Result<(f64, f64)>> = new_k
        .par_chunks_mut(cp)
        .zip(k_joints.par_chunks_mut(cp))
        .zip(search.idx.par_chunks_mut(stride))
        .zip(search.joints.par_chunks_mut(stride))
        .zip(search.len.par_iter_mut())
        .enumerate()
        .map_init(
            || {
                (
                    Marks::new(c_count),
                    Vec::with_capacity(stride),
                    Vec::with_capacity(stride),
                )
            },
            |(marks, space, ranked), (n, ((((k_out, kj_out), s_idx), s_lj), s_len))| {
                let extra = draw_extra(key, n, c_count);
                search_space_into(shared, n, extra, marks, space);
                let x = data.row(n);
                ranked.clear();
                for (slot, &c) in space.iter().enumerate() {
                    let cu = c as usize;
                    let lj = if params.is_active(cu) {
                        caches[cu].log_joint_raw(params.mean(cu), x)
                    } else {
                        f64::NEG_INFINITY
                    };
                    s_idx[slot] = c;
                    s_lj[slot] = lj;
                    ranked.push((c, lj));
                }
                *s_len = space.len() as u32;

                let old: Vec<f64> = shared
                    .k_set(n)
                    .iter()
                    .map(|c| {
                        let pos = space.iter().position(|s| s == c).expect("K within S");
                        s_lj[pos]
                    })
                    .collect();
                let before = log_sum_exp(&old);

                if ranked.len() < cp {
                    return Err(MfaError::InsufficientCandidates {
                        available: ranked.len(),
                        required: cp,
                    });
                }
                ranked.sort_by(|&a, &b| by_joint_desc(a, b));
                for (i, &(c, lj)) in ranked[..cp].iter().enumerate() {
                    k_out[i] = c;
                    kj_out[i] = lj;
                }
                Ok((before, log_sum_exp(kj_out)))
            },
        )
        .collect();
    debug_assert!(search.total() <= (n_pts * (cp * state.gsize + 1)) as u64);
    counter.add(search.total());
    let mut free_energy_before = 0.0;
    let mut free_energy = 0.0;
    for r in per_point {
        let (b, a) = r?;
        free_energy_before += b;
        free_energy += a;
    }

    // Block 2: hard partition.
    let labels: Vec<u32> = new_k
        .par_chunks(cp)
        .zip(k_joints.par_chunks(cp))
        .map(|(k, j)| hard_label(k, j))
        .collect();
    let partition = partition_from_labels(&labels, c_count);

    // Block 3: neighborhood update from retained joints.
    let log_pi: Vec<f64> = caches.iter().map(|c| c.log_pi).collect();
    let accumulator = accumulate_distances(&partition, &search, &log_pi, mode);
    let g_sets: Vec<Vec<u32>> = (0..c_count)
        .into_par_iter()
        .map(|c| update_g(&accumulator, c, state.gsize))
        .collect();

    // Block 4: truncated posteriors.
    let mut q = vec![0.0; n_pts * cp];
    q.par_chunks_mut(cp)
        .zip(k_joints.par_chunks(cp))
        .for_each(|(qn, jn)| {
            normalize_into(jn, qn);
        });

    state.k_sets = new_k;
    state.labels = labels;
    state.g_sets = g_sets;

    Ok(EStepOutput {
        q,
        k_joints,
        free_energy_before,
        free_energy,
        joint_evals: search.total(),
        search,
        accumulator,
    })
}

/// Exact posteriors over all components, `N x C`, plus the log-likelihood.
/// Adds `N * C` to `counter`.
pub fn full_e_step(
    params: &MfaParams,
    caches: &[ComponentCache],
    data: &Dataset,
    counter: &Counter,
) -> (Vec<f64>, f64) {
    let c_count = params.n_components();
    let mut q = vec![0.0; data.n() * c_count];
    let lls: Vec<f64> = q
        .par_chunks_mut(c_count)
        .enumerate()
        .map(|(n, qn)| {
            let x = data.row(n);
            for (c, slot) in qn.iter_mut().enumerate() {
                *slot = caches[c].log_joint_raw(params.mean(c), x);
            }
            let lse = log_sum_exp(qn);
            for v in qn.iter_mut() {
                *v = (*v - lse).exp();
            }
            lse
        })
        .collect();
    counter.add((data.n() * c_count) as u64);
    (q, lls.iter().sum())
}
