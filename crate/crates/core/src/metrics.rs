//! SQuAD-style answer scoring and latent-set overlap statistics.

use std::collections::{BTreeSet, HashMap};

/// Answer tokens after normalization.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct NormalizedAnswer(pub Vec<String>);

const ARTICLES: [&str; 3] = ["a", "an", "the"];

/// Lowercase, drop ASCII punctuation, split on whitespace, drop articles.
pub fn normalize(text: &str) -> NormalizedAnswer {
    let cleaned: String = text
        .to_lowercase()
        .chars()
        .filter(|c| !c.is_ascii_punctuation())
        .collect();
    NormalizedAnswer(
        cleaned
            .split_whitespace()
            .filter(|w| !ARTICLES.contains(w))
            .map(str::to_owned)
            .collect(),
    )
}

pub fn exact_match(pred: &str, gold: &str) -> f64 {
    if normalize(pred) == normalize(gold) {
        1.0
    } else {
        0.0
    }
}

/// Harmonic mean of clipped-count token precision and recall.
pub fn token_f1(pred: &str, gold: &str) -> f64 {
    let p = normalize(pred).0;
    let g = normalize(gold).0;
    match (p.is_empty(), g.is_empty()) {
        (true, true) => return 1.0,
        (true, false) | (false, true) => return 0.0,
        _ => {}
    }
    let mut counts: HashMap<&str, usize> = HashMap::new();
    for t in &g {
        *counts.entry(t).or_default() += 1;
    }
    let mut common = 0usize;
    for t in &p {
        if let Some(c) = counts.get_mut(t.as_str()) {
            if *c > 0 {
                *c -= 1;
                common += 1;
            }
        }
    }
    if common == 0 {
        return 0.0;
    }
    let precision = common as f64 / p.len() as f64;
    let recall = common as f64 / g.len() as f64;
    2.0 * precision * recall / (precision + recall)
}

/// |a ∩ b| / |a| as a percentage; 0 when `a` is empty.
pub fn overlap_pct(a: &BTreeSet<usize>, b: &BTreeSet<usize>) -> f64 {
    if a.is_empty() {
        return 0.0;
    }
    100.0 * a.intersection(b).count() as f64 / a.len() as f64
}

/// TopK and BottomK latent sets of one method.
pub type SelectionPair = (BTreeSet<usize>, BTreeSet<usize>);

/// Top/bottom selections of both methods for one example at K = 50%.
#[derive(Clone, Debug, Default)]
pub struct ExampleSelections {
    pub group: String,
    pub baseline: Option<SelectionPair>,
    pub gradsae: Option<SelectionPair>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct OverlapReport {
    pub cross_top: f64,
    pub cross_bottom: f64,
    pub inner_top: [f64; 2],
    pub inner_bottom: [f64; 2],
    pub cross_examples: usize,
    pub inner_contexts: usize,
    pub skipped_contexts: usize,
}

impl OverlapReport {
    /// Six-row table: activation count, half-K, cross and inner overlaps.
    /// Rows shared by both methods repeat the value in each column.
    pub fn to_tsv(&self, header: &[String], activation_avg: f64, half_avg: f64) -> String {
        let mut out = String::new();
        for h in header {
            out.push_str(&format!("# {h}\n"));
        }
        out.push_str(&format!(
            "# cross overlap: |baseline ∩ gradsae| / |baseline| over {} examples; \
             inner overlap: mean over ordered question pairs of |A ∩ B| / |A|, then over {} contexts ({} skipped)\n",
            self.cross_examples, self.inner_contexts, self.skipped_contexts
        ));
        out.push_str("row\tbaseline\tgradsae\n");
        let rows = [
            ("activation_avg", activation_avg, activation_avg),
            ("half_avg", half_avg, half_avg),
            ("cross_topk_overlap", self.cross_top, self.cross_top),
            ("cross_bottomk_overlap", self.cross_bottom, self.cross_bottom),
            ("inner_topk_overlap", self.inner_top[0], self.inner_top[1]),
            ("inner_bottomk_overlap", self.inner_bottom[0], self.inner_bottom[1]),
        ];
        for (name, b, g) in rows {
            out.push_str(&format!("{name}\t{b:.2}\t{g:.2}\n"));
        }
        out
    }
}

/// Mean over ordered pairs (i ≠ j) of overlap_pct(sets[i], sets[j]); `None` below two sets.
fn mean_pairwise(sets: &[&BTreeSet<usize>]) -> Option<f64> {
    if sets.len() < 2 {
        return None;
    }
    let mut total = 0.0;
    let mut n = 0usize;
    for (i, a) in sets.iter().enumerate() {
        for (j, b) in sets.iter().enumerate() {
            if i != j {
                total += overlap_pct(a, b);
                n += 1;
            }
        }
    }
    Some(total / n as f64)
}

/// Cross overlap compares methods on the same example with the baseline set as
/// denominator. Inner overlap averages [`overlap_pct`] over ordered question
/// pairs within a context, then over contexts; contexts with fewer than two
/// scored questions are skipped.
pub fn overlap_stats(examples: &[ExampleSelections]) -> OverlapReport {
    let mut cross = (0.0, 0.0, 0usize);
    for e in examples {
        if let (Some(b), Some(g)) = (&e.baseline, &e.gradsae) {
            cross.0 += overlap_pct(&b.0, &g.0);
            cross.1 += overlap_pct(&b.1, &g.1);
            cross.2 += 1;
        }
    }
    let mut by_group: Vec<(&str, Vec<&ExampleSelections>)> = Vec::new();
    for e in examples {
        match by_group.iter_mut().find(|(g, _)| *g == e.group) {
            Some((_, v)) => v.push(e),
            None => by_group.push((&e.group, vec![e])),
        }
    }
    let mut inner = [[0.0; 2]; 2]; // [method][top/bottom]
    let mut contexts = 0usize;
    let mut skipped = 0usize;
    for (_, members) in &by_group {
        let per_method = |pick: fn(&ExampleSelections) -> Option<&SelectionPair>| {
            let tops: Vec<_> = members.iter().filter_map(|e| pick(e)).map(|s| &s.0).collect();
            let bottoms: Vec<_> = members.iter().filter_map(|e| pick(e)).map(|s| &s.1).collect();
            mean_pairwise(&tops).zip(mean_pairwise(&bottoms))
        };
        let base = per_method(|e| e.baseline.as_ref());
        let grad = per_method(|e| e.gradsae.as_ref());
        match (base, grad) {
            (Some(b), Some(g)) => {
                inner[0][0] += b.0;
                inner[0][1] += b.1;
                inner[1][0] += g.0;
                inner[1][1] += g.1;
                contexts += 1;
            }
            _ => skipped += 1,
        }
    }
    let mean = |x: f64, n: usize| if n == 0 { 0.0 } else { x / n as f64 };
    OverlapReport {
        cross_top: mean(cross.0, cross.2),
        cross_bottom: mean(cross.1, cross.2),
        inner_top: [mean(inner[0][0], contexts), mean(inner[1][0], contexts)],
        inner_bottom: [mean(inner[0][1], contexts), mean(inner[1][1], contexts)],
        cross_examples: cross.2,
        inner_contexts: contexts,
        skipped_contexts: skipped,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn set(v: &[usize]) -> BTreeSet<usize> {
        v.iter().copied().collect()
    }

    #[test]
    fn normalize_examples() {
        assert_eq!(normalize("The Cat.").0, vec!["cat"]);
        assert_eq!(normalize("  An  apple ").0, vec!["apple"]);
        assert!(normalize("").0.is_empty());
    }

    #[test]
    fn exact_match_examples() {
        assert_eq!(exact_match("Denver Broncos", "Denver Broncos"), 1.0);
        assert_eq!(exact_match("the Denver Broncos", "Denver Broncos"), 1.0);
        assert_eq!(exact_match("Denver", "Denver Broncos"), 0.0);
    }

    #[test]
    fn f1_examples() {
        assert_eq!(token_f1("red car", "red car"), 1.0);
        assert!((token_f1("cat sat", "cat") - 2.0 / 3.0).abs() < 1e-15);
        assert_eq!(token_f1("dog", "cat"), 0.0);
        assert_eq!(token_f1("", ""), 1.0);
        assert_eq!(token_f1("the", "cat"), 0.0);
    }

    #[test]
    fn f1_clips_repeated_tokens() {
        // pred has "red" twice, gold once: overlap 1
        assert!((token_f1("red red", "red car") - 0.5).abs() < 1e-15);
    }

    #[test]
    fn overlap_examples() {
        assert_eq!(overlap_pct(&set(&[1, 2, 3]), &set(&[1, 2, 3])), 100.0);
        assert_eq!(overlap_pct(&set(&[1, 2, 3, 4]), &set(&[3, 4, 5, 6])), 50.0);
        assert_eq!(overlap_pct(&set(&[]), &set(&[1])), 0.0);
    }

    #[test]
    fn overlap_stats_by_hand() {
        let ex = |g: &str, b: (&[usize], &[usize]), r: (&[usize], &[usize])| ExampleSelections {
            group: g.into(),
            baseline: Some((set(b.0), set(b.1))),
            gradsae: Some((set(r.0), set(r.1))),
        };
        let rows = vec![
            ex("a", (&[1, 2], &[5, 6]), (&[1, 3], &[7, 8])),
            ex("a", (&[1, 2], &[5, 9]), (&[4, 3], &[8, 9])),
            ExampleSelections {
                group: "b".into(),
                baseline: Some((set(&[1]), set(&[2]))),
                gradsae: None,
            },
        ];
        let r = overlap_stats(&rows);
        assert_eq!(r.cross_examples, 2);
        assert_eq!(r.cross_top, 25.0); // (50 + 0) / 2
        assert_eq!(r.cross_bottom, 25.0); // (0 + 50) / 2
        assert_eq!(r.inner_top, [100.0, 50.0]);
        assert_eq!(r.inner_bottom, [50.0, 50.0]);
        assert_eq!((r.inner_contexts, r.skipped_contexts), (1, 1));
        let tsv = r.to_tsv(&[], 7.0, 4.0);
        let body: Vec<&str> = tsv.lines().filter(|l| !l.starts_with('#')).collect();
        assert_eq!(body.len(), 7);
        assert_eq!(body[1], "activation_avg\t7.00\t7.00");
        assert_eq!(body[5], "inner_topk_overlap\t100.00\t50.00");
    }

    fn words() -> impl Strategy<Value = Vec<String>> {
        prop::collection::vec(
            prop::sample::select(vec!["cat", "The", "dog.", "a", "red", "car", "!", "an", "Sat"]),
            0..6,
        )
        .prop_map(|v| v.into_iter().map(String::from).collect())
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(1000))]

        #[test]
        fn em_implies_full_f1(a in words(), b in words()) {
            let (a, b) = (a.join(" "), b.join(" "));
            if exact_match(&a, &b) == 1.0 {
                prop_assert_eq!(token_f1(&a, &b), 1.0);
            }
            prop_assert_eq!(exact_match(&a, &a), 1.0);
            prop_assert_eq!(token_f1(&a, &a), 1.0);
        }

        #[test]
        fn f1_is_symmetric_and_bounded(a in words(), b in words()) {
            let (a, b) = (a.join(" "), b.join(" "));
            let f = token_f1(&a, &b);
            prop_assert_eq!(f, token_f1(&b, &a));
            prop_assert!((0.0..=1.0).contains(&f));
        }

        #[test]
        fn normalize_is_idempotent(a in words()) {
            let once = normalize(&a.join(" "));
            prop_assert_eq!(normalize(&once.0.join(" ")), once);
        }

        #[test]
        fn overlap_is_a_percentage(a in prop::collection::btree_set(0usize..20, 0..10),
                                    b in prop::collection::btree_set(0usize..20, 0..10)) {
            let o = overlap_pct(&a, &b);
            prop_assert!((0.0..=100.0).contains(&o));
        }
    }
}
