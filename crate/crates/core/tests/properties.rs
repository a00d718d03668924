//! Property tests: each component against a small, independently written
//! reference implementation or an invariant it must keep.

use proptest::prelude::*;

use salience_core::alignment::{align_by, labels_from_alignments, AlignmentConfig};
use salience_core::baselines::{kmeans_plus_plus, lloyd};
use salience_core::embed::Embedding;
use salience_core::evaluation::{average_precision, lcs_len, recall_at_k, rouge_l_tokens};
use salience_core::retrieval::{retrieve, EvictionPolicy, KnowledgeBase, MemoryCache, PassageRecord, RetrievalMode};
use salience_core::scoring::marginalize;

// ---------- memory cache ----------

#[derive(Debug, Clone)]
enum CacheOp {
    Insert(u64),
    Touch(u64),
}

fn cache_op() -> impl Strategy<Value = CacheOp> {
    prop_oneof![
        (0u64..12).prop_map(CacheOp::Insert),
        (0u64..12).prop_map(CacheOp::Touch),
    ]
}

/// The eviction order as a plain list: front is the next victim.
struct ListCache {
    capacity: usize,
    lru: bool,
    order: Vec<String>,
}

impl ListCache {
    fn insert(&mut self, id: String) -> Option<String> {
        self.order.retain(|x| *x != id);
        self.order.push(id);
        if self.order.len() > self.capacity {
            Some(self.order.remove(0))
        } else {
            None
        }
    }

    fn touch(&mut self, id: &str) {
        if self.lru {
            if let Some(pos) = self.order.iter().position(|x| x == id) {
                let v = self.order.remove(pos);
                self.order.push(v);
            }
        }
    }
}

fn unit(v: f32) -> Embedding {
    Embedding::new(vec![v, 1.0]).unwrap()
}

proptest! {
    #[test]
    fn cache_matches_list_model(
        ops in prop::collection::vec(cache_op(), 0..200),
        capacity in 1usize..6,
        lru in any::<bool>(),
    ) {
        let policy = if lru { EvictionPolicy::Lru } else { EvictionPolicy::Fifo };
        let mut cache = MemoryCache::new(capacity, policy);
        let mut model = ListCache { capacity, lru, order: Vec::new() };
        for op in ops {
            match op {
                CacheOp::Insert(b) => {
                    let evicted = cache.insert(PassageRecord::memory(b, "t", unit(0.0))).unwrap();
                    let expected = model.insert(format!("mem:{b}"));
                    prop_assert_eq!(evicted.map(|r| r.passage_id), expected);
                }
                CacheOp::Touch(b) => {
                    let id = format!("mem:{b}");
                    cache.touch(&id);
                    model.touch(&id);
                }
            }
            prop_assert_eq!(cache.ids_in_eviction_order(), model.order.clone());
            prop_assert!(cache.len() <= capacity);
        }
    }
}

// ---------- marginalization ----------

fn logprob_matrix() -> impl Strategy<Value = (Vec<Vec<f64>>, Vec<f64>)> {
    (1usize..6, 1usize..8).prop_flat_map(|(rows, tokens)| {
        (
            prop::collection::vec(prop::collection::vec(-40.0f64..0.0, tokens), rows),
            prop::collection::vec(0.01f64..1.0, rows),
        )
            .prop_map(|(m, w)| {
                let s: f64 = w.iter().sum();
                (m, w.iter().map(|x| x / s).collect())
            })
    })
}

proptest! {
    #[test]
    fn marginal_is_bracketed_by_rows((m, w) in logprob_matrix()) {
        let out = marginalize(&m, &w).unwrap();
        for (t, v) in out.iter().enumerate() {
            let lo = m.iter().map(|r| r[t]).fold(f64::INFINITY, f64::min);
            let hi = m.iter().map(|r| r[t]).fold(f64::NEG_INFINITY, f64::max);
            prop_assert!(*v >= lo - 1e-12 && *v <= hi + 1e-12, "{v} outside [{lo}, {hi}]");
        }
    }

    #[test]
    fn marginal_ignores_row_order((m, w) in logprob_matrix(), rot in 0usize..6) {
        let r = rot % m.len();
        let mut m2 = m.clone();
        let mut w2 = w.clone();
        m2.rotate_left(r);
        w2.rotate_left(r);
        let a = marginalize(&m, &w).unwrap();
        let b = marginalize(&m2, &w2).unwrap();
        for (x, y) in a.iter().zip(&b) {
            prop_assert!((x - y).abs() <= 1e-12);
        }
    }

    #[test]
    fn one_hot_weights_select_a_row((m, _) in logprob_matrix(), pick in 0usize..6) {
        let z = pick % m.len();
        let w: Vec<f64> = (0..m.len()).map(|i| if i == z { 1.0 } else { 0.0 }).collect();
        prop_assert_eq!(marginalize(&m, &w).unwrap(), m[z].clone());
    }

    #[test]
    fn common_shift_passes_through((m, w) in logprob_matrix(), c in -500.0f64..0.0) {
        let shifted: Vec<Vec<f64>> = m.iter().map(|r| r.iter().map(|v| v + c).collect()).collect();
        let a = marginalize(&m, &w).unwrap();
        let b = marginalize(&shifted, &w).unwrap();
        for (x, y) in a.iter().zip(&b) {
            prop_assert!((x + c - y).abs() <= 1e-9 * (1.0 + y.abs()));
        }
    }

    #[test]
    fn marginal_matches_direct_sum((m, w) in logprob_matrix()) {
        // Values are >= -40, so the direct sum cannot underflow.
        let out = marginalize(&m, &w).unwrap();
        for (t, v) in out.iter().enumerate() {
            let direct: f64 = m.iter().zip(&w).map(|(r, wz)| wz * r[t].exp()).sum::<f64>().ln();
            prop_assert!((v - direct).abs() <= 1e-9 * (1.0 + direct.abs()));
        }
    }
}

// ---------- metrics ----------

/// Average precision straight from the definition: each positive's
/// precision is computed by counting who outranks it.
fn ap_by_counting(scores: &[f64], labels: &[bool]) -> f64 {
    let outranks = |j: usize, i: usize| scores[j] > scores[i] || (scores[j] == scores[i] && j < i);
    let positives: Vec<usize> = (0..scores.len()).filter(|&i| labels[i]).collect();
    if positives.is_empty() {
        return 0.0;
    }
    positives
        .iter()
        .map(|&i| {
            let above = (0..scores.len()).filter(|&j| outranks(j, i)).count();
            let pos_above = positives.iter().filter(|&&j| outranks(j, i)).count();
            (pos_above + 1) as f64 / (above + 1) as f64
        })
        .sum::<f64>()
        / positives.len() as f64
}

/// LCS by trying every subsequence of the shorter input.
fn lcs_brute(a: &[u8], b: &[u8]) -> usize {
    let is_subseq = |s: &[u8], t: &[u8]| {
        let mut it = t.iter();
        s.iter().all(|x| it.any(|y| y == x))
    };
    let (short, long) = if a.len() <= b.len() { (a, b) } else { (b, a) };
    let mut best = 0;
    for mask in 0u32..(1 << short.len()) {
        let sub: Vec<u8> = (0..short.len())
            .filter(|i| mask & (1 << i) != 0)
            .map(|i| short[i])
            .collect();
        if sub.len() > best && is_subseq(&sub, long) {
            best = sub.len();
        }
    }
    best
}

fn scored_labels() -> impl Strategy<Value = (Vec<f64>, Vec<bool>)> {
    (1usize..30).prop_flat_map(|n| {
        (
            // Coarse grid so ties occur.
            prop::collection::vec((0i32..8).prop_map(f64::from), n),
            prop::collection::vec(any::<bool>(), n),
        )
    })
}

proptest! {
    #[test]
    fn ap_matches_counting_oracle((s, l) in scored_labels()) {
        let got = average_precision(&s, &l).unwrap();
        prop_assert!((got - ap_by_counting(&s, &l)).abs() <= 1e-12);
    }

    #[test]
    fn ranking_metrics_ignore_monotone_transforms((s, l) in scored_labels(), a in 0.1f64..10.0, b in -5.0f64..5.0) {
        let t: Vec<f64> = s.iter().map(|x| a * x.exp() + b).collect();
        prop_assert_eq!(average_precision(&s, &l).unwrap(), average_precision(&t, &l).unwrap());
        prop_assert_eq!(recall_at_k(&s, &l).unwrap(), recall_at_k(&t, &l).unwrap());
    }

    #[test]
    fn metrics_stay_in_unit_interval((s, l) in scored_labels()) {
        for v in [average_precision(&s, &l).unwrap(), recall_at_k(&s, &l).unwrap()] {
            prop_assert!((0.0..=1.0).contains(&v));
        }
    }

    #[test]
    fn lcs_matches_brute_force(
        a in prop::collection::vec(0u8..4, 0..9),
        b in prop::collection::vec(0u8..4, 0..9),
    ) {
        prop_assert_eq!(lcs_len(&a, &b), lcs_brute(&a, &b));
        let r = rouge_l_tokens(&a, &b);
        prop_assert!((0.0..=1.0).contains(&r));
        prop_assert_eq!(r, rouge_l_tokens(&b, &a));
    }
}

// ---------- alignment ----------

fn sim_table() -> impl Strategy<Value = (usize, usize, Vec<f64>)> {
    (1usize..8, 1usize..40).prop_flat_map(|(s, f)| (Just(s), Just(f), prop::collection::vec(-0.2f64..1.0, s * f)))
}

fn config() -> impl Strategy<Value = AlignmentConfig> {
    (0.0f64..0.5, 0.0f64..0.9, 0.0f64..0.3, 1usize..5).prop_map(|(r, m, t, k)| AlignmentConfig {
        window_fraction: r,
        min_similarity: m,
        max_drop: t,
        max_targets: k,
    })
}

proptest! {
    #[test]
    fn alignments_respect_every_constraint((s, f, sim) in sim_table(), cfg in config()) {
        let at = |i: usize, j: usize| sim[i * f + j];
        let out = align_by(s, f, &cfg, at);
        prop_assert_eq!(out.len(), s);
        for (i, targets) in out.iter().enumerate() {
            prop_assert!(targets.len() <= cfg.max_targets);
            // Window recomputed from scratch.
            let anchor = ((i as f64 * f as f64 / s as f64).round() as usize).min(f - 1);
            let w = (cfg.window_fraction * f as f64 - 1e-9).ceil().max(0.0) as usize;
            let in_window: Vec<usize> = (0..f).filter(|&j| j.abs_diff(anchor) <= w).collect();
            let best = in_window.iter().map(|&j| at(i, j)).fold(f64::NEG_INFINITY, f64::max);
            for a in targets {
                prop_assert!(in_window.contains(&a.index));
                prop_assert_eq!(a.score, at(i, a.index));
                prop_assert!(a.score >= cfg.min_similarity - 1e-12);
                prop_assert!(a.score >= best - cfg.max_drop - 1e-12);
            }
            for pair in targets.windows(2) {
                prop_assert!(pair[0].score >= pair[1].score);
            }
            // Nothing eligible is left out unless the cap is full.
            let eligible = in_window
                .iter()
                .filter(|&&j| at(i, j) >= cfg.min_similarity && at(i, j) >= best - cfg.max_drop)
                .count();
            prop_assert_eq!(targets.len(), eligible.min(cfg.max_targets));
        }
    }

    #[test]
    fn raising_the_floor_never_adds_labels((s, f, sim) in sim_table(), cfg in config(), bump in 0.0f64..0.5) {
        let at = |i: usize, j: usize| sim[i * f + j];
        // Without the cap, a higher floor only removes candidates.
        let loose = AlignmentConfig { max_targets: f, ..cfg };
        let tight = AlignmentConfig { min_similarity: cfg.min_similarity + bump, ..loose };
        let a = labels_from_alignments(f, &align_by(s, f, &loose, at));
        let b = labels_from_alignments(f, &align_by(s, f, &tight, at));
        for (x, y) in a.iter().zip(&b) {
            prop_assert!(x.salient || !y.salient);
        }
    }
}

// ---------- retrieval ----------

fn vectors(n: usize, d: usize) -> impl Strategy<Value = Vec<Vec<f32>>> {
    // Small integer grid so exact score ties are common.
    prop::collection::vec(prop::collection::vec((-2i8..3).prop_map(f32::from), d), n)
}

proptest! {
    #[test]
    fn kb_top_k_matches_full_sort(rows in vectors(40, 4), q in vectors(1, 4), k in 1usize..50) {
        let kb = KnowledgeBase::from_embeddings(
            4,
            rows.iter().enumerate().map(|(i, v)| (format!("p{i:03}"), String::new(), Embedding::new(v.clone()).unwrap())),
        )
        .unwrap();
        let query = Embedding::new(q[0].clone()).unwrap();
        let mut all: Vec<(usize, f64)> = rows
            .iter()
            .enumerate()
            .map(|(i, v)| (i, v.iter().zip(&q[0]).map(|(a, b)| f64::from(*a) * f64::from(*b)).sum()))
            .collect();
        // Ids are zero-padded, so row order is id order.
        all.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then(a.0.cmp(&b.0)));
        all.truncate(k);
        prop_assert_eq!(kb.top_k(&query, k).unwrap(), all);
    }

    #[test]
    fn merged_retrieval_matches_full_sort(
        kb_rows in vectors(15, 3),
        mem_rows in vectors(10, 3),
        q in vectors(1, 3),
        k in 1usize..30,
    ) {
        let kb = KnowledgeBase::from_embeddings(
            3,
            kb_rows.iter().enumerate().map(|(i, v)| (format!("p{i:03}"), String::new(), Embedding::new(v.clone()).unwrap())),
        )
        .unwrap();
        let mut cache = MemoryCache::new(100, EvictionPolicy::Fifo);
        for (i, v) in mem_rows.iter().enumerate() {
            cache.insert(PassageRecord::memory(i as u64, "", Embedding::new(v.clone()).unwrap())).unwrap();
        }
        let dot = |v: &[f32]| -> f64 { v.iter().zip(&q[0]).map(|(a, b)| f64::from(*a) * f64::from(*b)).sum() };
        // (score, memory-first rank, memory id, passage id)
        let mut all: Vec<(f64, u8, u64, String)> = kb_rows
            .iter()
            .enumerate()
            .map(|(i, v)| (dot(v), 1, 0, format!("p{i:03}")))
            .chain(mem_rows.iter().enumerate().map(|(i, v)| (dot(v), 0, i as u64, format!("mem:{i}"))))
            .collect();
        all.sort_by(|a, b| {
            b.0.partial_cmp(&a.0).unwrap().then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)).then(a.3.cmp(&b.3))
        });
        all.truncate(k);
        let got = retrieve(&Embedding::new(q[0].clone()).unwrap(), &kb, &mut cache, k, RetrievalMode::KbAndMem, 0).unwrap();
        let got_ids: Vec<String> = got.dump(0).retrieved.into_iter().map(|d| d.passage_id).collect();
        let want_ids: Vec<String> = all.into_iter().map(|t| t.3).collect();
        prop_assert_eq!(got_ids, want_ids);
        let wsum: f64 = got.weights().iter().sum();
        prop_assert!((wsum - 1.0).abs() < 1e-12);
    }
}

// ---------- k-means ----------

fn sq(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum()
}

/// Textbook Lloyd: assign by strict nearest (lowest index on ties), move
/// each non-empty centre to its mean, stop when assignments repeat.
fn lloyd_oracle(points: &[Vec<f64>], mut centres: Vec<Vec<f64>>, iters: usize) -> (Vec<usize>, Vec<Vec<f64>>) {
    let assign = |centres: &[Vec<f64>]| -> Vec<usize> {
        points
            .iter()
            .map(|p| {
                let d: Vec<f64> = centres.iter().map(|c| sq(p, c)).collect();
                let min = d.iter().cloned().fold(f64::INFINITY, f64::min);
                d.iter().position(|&x| x == min).unwrap()
            })
            .collect()
    };
    let mut a = assign(&centres);
    for _ in 0..iters {
        for (c, centre) in centres.iter_mut().enumerate() {
            let members: Vec<&Vec<f64>> = points.iter().zip(&a).filter(|(_, &x)| x == c).map(|(p, _)| p).collect();
            if members.is_empty() {
                continue;
            }
            for (d, v) in centre.iter_mut().enumerate() {
                *v = members.iter().map(|m| m[d]).sum::<f64>() / members.len() as f64;
            }
        }
        let next = assign(&centres);
        if next == a {
            break;
        }
        a = next;
    }
    (a, centres)
}

fn point_cloud() -> impl Strategy<Value = (Vec<Vec<f64>>, usize, u64)> {
    (2usize..30, 1usize..5, any::<u64>()).prop_flat_map(|(n, k, seed)| {
        (
            prop::collection::vec(prop::collection::vec(-3.0f64..3.0, 3), n),
            Just(k.min(n)),
            Just(seed),
        )
    })
}

proptest! {
    #[test]
    fn lloyd_matches_textbook_oracle((points, k, seed) in point_cloud()) {
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let init = kmeans_plus_plus(&points, k, &mut rng);
        prop_assert_eq!(init.len(), k);
        let got = lloyd(&points, init.clone(), 100, 0.0);
        let (assign, centres) = lloyd_oracle(&points, init, 100);
        prop_assert_eq!(&got.assignments, &assign);
        for (a, b) in got.centroids.iter().zip(&centres) {
            prop_assert!(sq(a, b) < 1e-18);
        }
        for pair in got.objective.windows(2) {
            prop_assert!(pair[1] <= pair[0] + 1e-9, "objective rose: {:?}", got.objective);
        }
    }
}
