//! Agglomeration over unit vectors with cosine distance `1 − cos`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::math;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Linkage {
    #[default]
    Average,
    Complete,
    Single,
}

/// One agglomeration step. `a` and `b` are leaf ids standing for the two
/// clusters being joined.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Merge {
    pub a: usize,
    pub b: usize,
    pub distance: f32,
}

/// Full merge sequence over `n` unit vectors (rows of `units`), sorted by
/// distance. `complete_limit` caps the bytes of the pairwise table that
/// complete linkage needs.
pub fn merges(units: &[f32], d: usize, linkage: Linkage, complete_limit: usize) -> Result<Vec<Merge>> {
    let n = units.len() / d;
    let mut out = match linkage {
        Linkage::Average => average_chain(units, d, n),
        Linkage::Single => single_mst(units, d, n),
        Linkage::Complete => {
            let bytes = n * n.saturating_sub(1) / 2 * 4;
            if bytes > complete_limit {
                return Err(Error::Validation(format!(
                    "complete linkage over {n} vectors needs {bytes} bytes of distances; limit is {complete_limit}"
                )));
            }
            complete_chain(units, d, n)
        }
    };
    out.sort_by(|x, y| x.distance.total_cmp(&y.distance));
    Ok(out)
}

/// Labels `0..n` after applying the first `n − k` merges. Labels are ordered
/// by smallest member.
pub fn cut(merges: &[Merge], n: usize, k: usize) -> Vec<u32> {
    let mut parent: Vec<usize> = (0..n).collect();
    fn find(parent: &mut [usize], mut x: usize) -> usize {
        while parent[x] != x {
            parent[x] = parent[parent[x]];
            x = parent[x];
        }
        x
    }
    for m in merges.iter().take(n.saturating_sub(k)) {
        let (ra, rb) = (find(&mut parent, m.a), find(&mut parent, m.b));
        // keep the smaller leaf as root so roots are smallest members
        let (lo, hi) = if ra < rb { (ra, rb) } else { (rb, ra) };
        parent[hi] = lo;
    }
    let mut label = vec![u32::MAX; n];
    let mut next = 0u32;
    let mut out = vec![0u32; n];
    for i in 0..n {
        let r = find(&mut parent, i);
        if label[r] == u32::MAX {
            label[r] = next;
            next += 1;
        }
        out[i] = label[r];
    }
    out
}

fn cosine_distance(a: &[f32], b: &[f32]) -> f32 {
    1.0 - math::dot(a, b)
}

/// Nearest-neighbour chain for average linkage. Cluster `A` is represented by
/// the sum `S_A` of its unit vectors, so `D(A, B) = 1 − S_A·S_B / (|A|·|B|)`
/// is the mean pairwise cosine distance, evaluated on demand.
fn average_chain(units: &[f32], d: usize, n: usize) -> Vec<Merge> {
    let mut sums = units.to_vec();
    let mut size = vec![1usize; n];
    let mut active: Vec<usize> = (0..n).collect();
    let mut alive = vec![true; n];
    let dist = |sums: &[f32], size: &[usize], a: usize, b: usize| -> f32 {
        1.0 - math::dot(&sums[a * d..(a + 1) * d], &sums[b * d..(b + 1) * d]) / (size[a] * size[b]) as f32
    };
    let mut out = Vec::with_capacity(n.saturating_sub(1));
    let mut chain: Vec<usize> = Vec::new();
    while active.len() > 1 {
        if chain.is_empty() {
            chain.push(*active.iter().min().expect("non-empty"));
        }
        let top = *chain.last().expect("non-empty");
        let prev = chain.len().checked_sub(2).map(|i| chain[i]);
        let (mut best, mut best_d) = (usize::MAX, f32::INFINITY);
        for &c in &active {
            if c == top {
                continue;
            }
            let dc = dist(&sums, &size, top, c);
            if dc < best_d || (dc == best_d && c < best) {
                best = c;
                best_d = dc;
            }
        }
        // prefer the chain predecessor on ties so the chain terminates
        if let Some(p) = prev {
            if dist(&sums, &size, top, p) <= best_d {
                best = p;
                best_d = dist(&sums, &size, top, p);
            }
        }
        if Some(best) == prev {
            chain.truncate(chain.len() - 2);
            let (keep, drop) = (top.min(best), top.max(best));
            out.push(Merge { a: keep, b: drop, distance: best_d.max(0.0) });
            for j in 0..d {
                sums[keep * d + j] += sums[drop * d + j];
            }
            size[keep] += size[drop];
            alive[drop] = false;
            active.retain(|&c| alive[c]);
        } else {
            chain.push(best);
        }
    }
    out
}

/// Prim's algorithm on the implicit complete graph; the MST edges are the
/// single-linkage merges.
fn single_mst(units: &[f32], d: usize, n: usize) -> Vec<Merge> {
    if n < 2 {
        return Vec::new();
    }
    let row = |i: usize| &units[i * d..(i + 1) * d];
    let mut in_tree = vec![false; n];
    let mut best = vec![f32::INFINITY; n];
    let mut from = vec![0usize; n];
    let mut out = Vec::with_capacity(n - 1);
    let mut current = 0;
    in_tree[0] = true;
    for _ in 1..n {
        let mut next = usize::MAX;
        let mut next_d = f32::INFINITY;
        for j in 0..n {
            if in_tree[j] {
                continue;
            }
            let dj = cosine_distance(row(current), row(j));
            if dj < best[j] {
                best[j] = dj;
                from[j] = current;
            }
            if best[j] < next_d || (best[j] == next_d && j < next) {
                next = j;
                next_d = best[j];
            }
        }
        in_tree[next] = true;
        out.push(Merge { a: from[next].min(next), b: from[next].max(next), distance: next_d.max(0.0) });
        current = next;
    }
    out
}

/// Nearest-neighbour chain over a condensed distance table with the
/// Lance–Williams update `D(A∪B, C) = max(D(A, C), D(B, C))`.
fn complete_chain(units: &[f32], d: usize, n: usize) -> Vec<Merge> {
    let idx = |i: usize, j: usize| {
        let (i, j) = if i < j { (i, j) } else { (j, i) };
        n * i - i * (i + 1) / 2 + (j - i - 1)
    };
    let mut table = vec![0.0f32; n * n.saturating_sub(1) / 2];
    for i in 0..n {
        for j in i + 1..n {
            table[idx(i, j)] = cosine_distance(&units[i * d..(i + 1) * d], &units[j * d..(j + 1) * d]);
        }
    }
    let mut active: Vec<usize> = (0..n).collect();
    let mut alive = vec![true; n];
    let mut out = Vec::with_capacity(n.saturating_sub(1));
    let mut chain: Vec<usize> = Vec::new();
    while active.len() > 1 {
        if chain.is_empty() {
            chain.push(active[0]);
        }
        let top = *chain.last().expect("non-empty");
        let prev = chain.len().checked_sub(2).map(|i| chain[i]);
        let (mut best, mut best_d) = (usize::MAX, f32::INFINITY);
        for &c in &active {
            if c != top && (table[idx(top, c)] < best_d || (table[idx(top, c)] == best_d && c < best)) {
                best = c;
                best_d = table[idx(top, c)];
            }
        }
        if let Some(p) = prev {
            if table[idx(top, p)] <= best_d {
                best = p;
                best_d = table[idx(top, p)];
            }
        }
        if Some(best) == prev {
            chain.truncate(chain.len() - 2);
            let (keep, drop) = (top.min(best), top.max(best));
            out.push(Merge { a: keep, b: drop, distance: best_d.max(0.0) });
            alive[drop] = false;
            active.retain(|&c| alive[c]);
            for &c in &active {
                if c != keep {
                    let m = table[idx(keep, c)].max(table[idx(drop, c)]);
                    table[idx(keep, c)] = m;
                }
            }
        } else {
            chain.push(best);
        }
    }
    out
}
