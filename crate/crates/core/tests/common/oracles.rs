//! Brute-force reference implementations shared by the tests and the
//! acceptance run.

use ffn_lens::exit::ExitExample;
use ffn_lens::lens::ReadoutNorm;
use ffn_lens::model::ResidualTrace;
use ffn_lens::Model;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{naive_argmax, random_vector};

/// Rank by counting: tokens with a larger logit, or an equal logit and a lower id, come first.
pub fn naive_rank(logits: &[f32], token: usize) -> usize {
    let s = logits[token];
    1 + logits.iter().enumerate().filter(|&(u, &x)| x > s || (x == s && u < token)).count()
}

pub struct ReadScan {
    pub pre: Vec<usize>,
    pub post: Vec<usize>,
    pub rank_after: Vec<usize>,
    pub w: usize,
}

pub fn read_scan(model: &Model, trace: &ResidualTrace, pos: usize, norm: ReadoutNorm) -> ReadScan {
    let layers = trace.num_layers();
    let read = |x: &[f32]| match norm {
        ReadoutNorm::Raw => model.project(x),
        ReadoutNorm::FinalLn => model.final_logits(x),
    };
    let y = trace.final_logits_at(pos).unwrap().to_vec();
    let mut o = ReadScan { pre: vec![], post: vec![], rank_after: vec![], w: naive_argmax(&y) };
    for l in 0..layers {
        let rec = trace.record(pos, l).unwrap();
        let p = read(&rec.pre_ffn);
        let q = if l + 1 == layers { y.clone() } else { read(&rec.post_ffn) };
        let top = naive_argmax(&p);
        o.pre.push(top);
        o.post.push(naive_argmax(&q));
        o.rank_after.push(naive_rank(&q, top));
    }
    o
}

/// Smallest layer after which `w` is on top at every later read point.
pub fn scan_saturation(o: &ReadScan, both: bool) -> Option<usize> {
    let layers = o.post.len();
    let holds = |l: usize| (l..layers).all(|j| o.post[j] == o.w) && (!both || (l + 1..layers).all(|j| o.pre[j] == o.w));
    let l = (0..layers).find(|&l| holds(l))?;
    (l < layers - 1 && o.pre[l] != o.w).then_some(l)
}

pub fn scan_elimination(o: &ReadScan) -> Option<(usize, usize)> {
    let max = *o.rank_after.iter().max()?;
    if max <= 1 {
        return None;
    }
    let l = o.rank_after.iter().position(|&r| r == max).unwrap();
    Some((l, max))
}

pub fn exit_example(id: usize, sat: Option<usize>, sets: &[&[u32]], post_top: &[u32], final_top: u32) -> ExitExample {
    ExitExample {
        id,
        saturation_layer: sat,
        cluster_sets: sets.iter().map(|s| s.to_vec()).collect(),
        post_top: post_top.to_vec(),
        final_top,
    }
}

/// Five examples over three layers; halting layers worked out by hand:
/// A halts at 0, B at 1, C never, D at 0 (wrong token), E at 1. Accuracy
/// 4/5; saved layers over the correct ones (2 + 1 + 0 + 1) / 4 = 1.
pub fn exit_fixture() -> Vec<ExitExample> {
    vec![
        exit_example(0, Some(0), &[&[1, 2], &[3], &[4]], &[10, 10, 10], 10),
        exit_example(1, Some(1), &[&[5], &[1, 2], &[6]], &[11, 12, 12], 12),
        exit_example(2, None, &[&[7], &[8], &[9]], &[13, 13, 14], 14),
        exit_example(3, Some(0), &[&[1, 3], &[3], &[4]], &[15, 16, 16], 16),
        exit_example(4, None, &[&[5, 6], &[2], &[9]], &[17, 18, 18], 18),
    ]
}

pub struct ExitFixture {
    pub layers: usize,
    pub examples: Vec<ExitExample>,
}

fn random_set(rng: &mut impl Rng) -> Vec<u32> {
    let mut s: Vec<u32> = (0..rng.random_range(0..4)).map(|_| rng.random_range(0..6)).collect();
    s.sort_unstable();
    s.dedup();
    s
}

pub fn random_exit_fixture(rng: &mut impl Rng) -> ExitFixture {
    let layers = rng.random_range(2..6);
    let n = rng.random_range(1..10);
    let examples = (0..n)
        .map(|id| {
            let sat = rng.random_bool(0.7).then(|| rng.random_range(0..layers));
            let cluster_sets = (0..layers).map(|_| random_set(rng)).collect();
            let final_top = rng.random_range(0..5);
            let post_top = (0..layers).map(|_| rng.random_range(0..5)).collect();
            ExitExample { id, saturation_layer: sat, cluster_sets, post_top, final_top }
        })
        .collect();
    ExitFixture { layers, examples }
}

pub fn random_active_set(rng: &mut impl Rng) -> Vec<u32> {
    random_set(rng)
}

fn inter(a: &[u32], b: &[u32]) -> usize {
    a.iter().filter(|x| b.contains(x)).count()
}

/// `(sum, max, count)` of intersections, compared as exact fractions.
fn stats(active: &[u32], sets: &[&Vec<u32>]) -> (usize, usize, usize) {
    let xs: Vec<usize> = sets.iter().map(|s| inter(active, s)).collect();
    (xs.iter().sum(), xs.iter().copied().max().unwrap_or(0), xs.len())
}

fn beats(t: (usize, usize, usize), n: (usize, usize, usize)) -> bool {
    n.2 == 0 || (t.0 * n.2 > n.0 * t.2 && t.1 > n.1)
}

/// The halting inequalities evaluated directly on the examples.
pub fn exit_oracle(f: &ExitFixture, layer: usize, active: &[u32], strict: bool) -> bool {
    let t: Vec<&Vec<u32>> = f.examples.iter().filter(|e| e.saturation_layer == Some(layer)).map(|e| &e.cluster_sets[layer]).collect();
    if t.is_empty() {
        return false;
    }
    let ts = stats(active, &t);
    let others = |l: usize| f.examples.iter().filter(move |e| e.saturation_layer != Some(l));
    if strict {
        (0..f.layers).all(|l| {
            others(l).all(|e| {
                let tag = e.saturation_layer;
                let part: Vec<&Vec<u32>> = others(l).filter(|o| o.saturation_layer == tag).map(|o| &o.cluster_sets[l]).collect();
                beats(ts, stats(active, &part))
            })
        })
    } else {
        (layer + 1..f.layers).all(|l| {
            let n: Vec<&Vec<u32>> = others(l).map(|e| &e.cluster_sets[l]).collect();
            beats(ts, stats(active, &n))
        })
    }
}

/// `3 × per` rows in 8 dimensions, one tight group around each of the first
/// three axes, interleaved; returns rows and group labels.
pub fn three_groups(per: usize, seed: u64) -> (Vec<f32>, Vec<u32>) {
    let d = 8;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut rows = Vec::new();
    let mut truth = Vec::new();
    for i in 0..3 * per {
        let g = i % 3;
        let mut v = random_vector(&mut rng, d, 0.05);
        v[g] += 1.0;
        rows.extend(v);
        truth.push(g as u32);
    }
    (rows, truth)
}
