//! Category-level scoring of side-effect predictions against gold labels,
//! with random, naive and oracle baselines.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::path::Path;

use log::warn;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::attribution::{AmpClass, LatentAttribution, NormClass};
use crate::interp::{render, Archive, Endpoint, FeatureDossier, Templates};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Source {
    Pipeline,
    Random,
    Naive,
    Oracle,
}

/// Category -> flag. Names are canonical (lowercase, trimmed, single spaces).
pub type CategoryFlags = BTreeMap<String, bool>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Predictions {
    pub source: Source,
    pub flags: CategoryFlags,
}

pub fn canonical_category(name: &str) -> String {
    name.split_whitespace().collect::<Vec<_>>().join(" ").to_lowercase()
}

fn parse_flag(s: &str) -> Option<bool> {
    match s.trim().to_lowercase().as_str() {
        "1" | "true" | "yes" => Some(true),
        "0" | "false" | "no" => Some(false),
        _ => None,
    }
}

/// Reads `category,flag` lines; `#` comments and a `category,...` header
/// are skipped.
pub fn read_flags(path: &Path) -> Result<CategoryFlags> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_flags(&text).map_err(|e| match e {
        Error::Format(msg) => Error::Format(format!("{}: {msg}", path.display())),
        other => other,
    })
}

pub fn parse_flags(text: &str) -> Result<CategoryFlags> {
    let mut out = BTreeMap::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (name, flag) = line
            .rsplit_once(',')
            .ok_or_else(|| Error::Format(format!("line {}: expected `category,flag`", i + 1)))?;
        if i == 0 && name.trim().eq_ignore_ascii_case("category") {
            continue;
        }
        let flag = parse_flag(flag).ok_or_else(|| Error::Format(format!("line {}: bad flag {flag:?}", i + 1)))?;
        if out.insert(canonical_category(name), flag).is_some() {
            return Err(Error::Format(format!("line {}: duplicate category {name:?}", i + 1)));
        }
    }
    Ok(out)
}

pub fn flags_to_text(flags: &CategoryFlags) -> String {
    let mut out = String::from("category,affected\n");
    for (k, v) in flags {
        let _ = writeln!(out, "{k},{v}");
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetailRow {
    pub category: String,
    pub predicted: bool,
    pub gold: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub source: Source,
    pub tp: u64,
    pub fp: u64,
    #[serde(rename = "fn")]
    pub fn_: u64,
    pub tn: u64,
    /// Percentages.
    pub accuracy: f64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub rows: Vec<DetailRow>,
    pub config: BTreeMap<String, String>,
}

fn pct(num: u64, den: u64) -> f64 {
    if den == 0 {
        0.0
    } else {
        100.0 * num as f64 / den as f64
    }
}

/// Confusion counts and metrics in percent. Precision and recall with an
/// empty denominator are 0, and so is F1 when both are 0.
pub fn score(pred: &Predictions, gold: &CategoryFlags) -> Result<EvalReport> {
    let p: BTreeSet<&String> = pred.flags.keys().collect();
    let g: BTreeSet<&String> = gold.keys().collect();
    if p != g {
        let strays = p.symmetric_difference(&g).map(|s| s.to_string()).collect();
        return Err(Error::Category { strays });
    }
    let (mut tp, mut fp, mut fn_, mut tn) = (0, 0, 0, 0);
    let mut rows = Vec::with_capacity(gold.len());
    for (cat, &truth) in gold {
        let predicted = pred.flags[cat];
        match (predicted, truth) {
            (true, true) => tp += 1,
            (true, false) => fp += 1,
            (false, true) => fn_ += 1,
            (false, false) => tn += 1,
        }
        rows.push(DetailRow {
            category: cat.clone(),
            predicted,
            gold: truth,
        });
    }
    let precision = pct(tp, tp + fp);
    let recall = pct(tp, tp + fn_);
    let f1 = if precision + recall == 0.0 {
        0.0
    } else {
        2.0 * precision * recall / (precision + recall)
    };
    Ok(EvalReport {
        source: pred.source,
        tp,
        fp,
        fn_,
        tn,
        accuracy: pct(tp + tn, tp + fp + fn_ + tn),
        precision,
        recall,
        f1,
        rows,
        config: BTreeMap::new(),
    })
}

/// Independent Bernoulli(p) per category.
pub fn random_baseline(universe: &[String], p: f64, seed: u64) -> Result<Predictions> {
    if !(0.0..=1.0).contains(&p) {
        return Err(Error::Param(format!("p must lie in [0, 1], got {p}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let names: BTreeSet<String> = universe.iter().map(|c| canonical_category(c)).collect();
    Ok(Predictions {
        source: Source::Random,
        flags: names.into_iter().map(|c| (c, rng.random_bool(p))).collect(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SweepSummary {
    pub seeds: u64,
    pub accuracy: f64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

/// Mean random-baseline metrics over seeds `first_seed..first_seed + seeds`.
pub fn random_sweep(gold: &CategoryFlags, p: f64, first_seed: u64, seeds: u64) -> Result<SweepSummary> {
    if seeds == 0 {
        return Err(Error::Param("need at least one seed".into()));
    }
    let universe: Vec<String> = gold.keys().cloned().collect();
    let mut sum = [0.0; 4];
    for s in first_seed..first_seed + seeds {
        let r = score(&random_baseline(&universe, p, s)?, gold)?;
        for (acc, v) in sum.iter_mut().zip([r.accuracy, r.precision, r.recall, r.f1]) {
            *acc += v;
        }
    }
    let n = seeds as f64;
    Ok(SweepSummary {
        seeds,
        accuracy: sum[0] / n,
        precision: sum[1] / n,
        recall: sum[2] / n,
        f1: sum[3] / n,
    })
}

pub fn oracle_baseline(gold: &CategoryFlags) -> Predictions {
    Predictions {
        source: Source::Oracle,
        flags: gold.clone(),
    }
}

/// Asks the endpoint which categories the fine-tuning task should affect.
/// The reply must be a JSON array of names from the universe.
pub fn naive_baseline(
    endpoint: &dyn Endpoint,
    archive: &mut Archive,
    templates: &Templates,
    task: &str,
    universe: &[String],
) -> Result<Predictions> {
    if universe.is_empty() {
        return Err(Error::Param("empty category universe".into()));
    }
    let names: BTreeSet<String> = universe.iter().map(|c| canonical_category(c)).collect();
    let listing = names.iter().cloned().collect::<Vec<_>>().join(", ");
    let prompt = render(&templates.naive, &[("task", task.trim()), ("categories", &listing)]);
    let raw = archive.call(endpoint, "naive", &templates.version, prompt)?;
    let picked: Vec<String> = serde_json::from_str(raw.trim()).map_err(|e| Error::Completion {
        reason: format!("expected a JSON array of strings: {e}"),
        raw: raw.clone(),
    })?;
    let mut flags: CategoryFlags = names.iter().map(|c| (c.clone(), false)).collect();
    for p in picked {
        match flags.get_mut(&canonical_category(&p)) {
            Some(f) => *f = true,
            None => {
                return Err(Error::Completion {
                    reason: format!("category {p:?} is not in the list"),
                    raw,
                })
            }
        }
    }
    Ok(Predictions {
        source: Source::Naive,
        flags,
    })
}

/// Maps free-form labels onto the gold taxonomy.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct Synonyms(pub BTreeMap<String, String>);

impl Synonyms {
    pub fn shipped() -> Self {
        Self::parse(include_str!("../data/synonyms.json")).expect("shipped synonyms parse")
    }

    pub fn parse(text: &str) -> Result<Self> {
        let raw: BTreeMap<String, String> =
            serde_json::from_str(text).map_err(|e| Error::Format(format!("synonym file: {e}")))?;
        Ok(Synonyms(
            raw.into_iter()
                .map(|(k, v)| (canonical_category(&k), canonical_category(&v)))
                .collect(),
        ))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }

    /// Exact match first, then the synonym table.
    pub fn resolve<'a>(&self, label: &str, universe: &'a BTreeSet<String>) -> Option<&'a String> {
        let label = canonical_category(label);
        universe
            .get(&label)
            .or_else(|| self.0.get(&label).and_then(|c| universe.get(c)))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SelectionRule {
    /// Minimum number of qualifying latents per category.
    pub c: usize,
}

impl Default for SelectionRule {
    fn default() -> Self {
        SelectionRule { c: 1 }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct PipelineStats {
    /// Dossiers with no category.
    pub skipped: usize,
    /// Labels that matched no category of the universe, with counts.
    pub unmatched_labels: BTreeMap<String, usize>,
    /// Qualifying latents per category.
    pub support: BTreeMap<String, usize>,
}

/// A category is predicted affected when at least `rule.c` of its latents
/// are not shared or are amplified/minimized. Classes come from `table`.
/// Only category names are read from `universe`; gold flags never enter.
pub fn pipeline_predictions(
    dossiers: &[FeatureDossier],
    table: &[LatentAttribution],
    universe: &[String],
    rule: SelectionRule,
    synonyms: &Synonyms,
) -> Result<(Predictions, PipelineStats)> {
    if rule.c == 0 {
        return Err(Error::Param("selection threshold c must be at least 1".into()));
    }
    let names: BTreeSet<String> = universe.iter().map(|c| canonical_category(c)).collect();
    let classes: BTreeMap<usize, (NormClass, AmpClass)> =
        table.iter().map(|r| (r.latent_id, (r.norm_class, r.amp_class))).collect();
    let mut stats = PipelineStats::default();
    for d in dossiers {
        let Some(label) = d.category.as_deref() else {
            stats.skipped += 1;
            continue;
        };
        let (norm, amp) = classes.get(&d.latent_id).copied().unwrap_or((d.norm_class, d.amp_class));
        let qualifies = norm != NormClass::Shared || matches!(amp, AmpClass::Amplified | AmpClass::Minimized);
        match synonyms.resolve(label, &names) {
            Some(cat) => {
                if qualifies {
                    *stats.support.entry(cat.clone()).or_insert(0) += 1;
                }
            }
            None => *stats.unmatched_labels.entry(canonical_category(label)).or_insert(0) += 1,
        }
    }
    if stats.skipped > 0 {
        warn!("{} dossiers without a category were skipped", stats.skipped);
    }
    let flags = names
        .into_iter()
        .map(|c| {
            let hit = stats.support.get(&c).copied().unwrap_or(0) >= rule.c;
            (c, hit)
        })
        .collect();
    Ok((
        Predictions {
            source: Source::Pipeline,
            flags,
        },
        stats,
    ))
}

/// `|A ∩ M| / |M|`: how many semantically matched latents are amplified.
/// `None` when `M` is empty.
pub fn em_overlap(amplified: &BTreeSet<usize>, matched: &BTreeSet<usize>) -> Option<f64> {
    if matched.is_empty() {
        return None;
    }
    Some(amplified.intersection(matched).count() as f64 / matched.len() as f64)
}

/// Fixed-width comparison table, one row per report.
pub fn render_table(reports: &[EvalReport]) -> String {
    let mut out = format!("{:<10} {:>7} {:>7} {:>7} {:>7}\n", "method", "acc", "f1", "prec", "rec");
    for r in reports {
        let name = serde_json::to_value(r.source).expect("source serializes");
        let _ = writeln!(
            out,
            "{:<10} {:>7.2} {:>7.2} {:>7.2} {:>7.2}",
            name.as_str().unwrap_or_default(),
            r.accuracy,
            r.f1,
            r.precision,
            r.recall
        );
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::interp::MockEndpoint;
    use proptest::prelude::*;

    fn flags(pairs: &[(&str, bool)]) -> CategoryFlags {
        pairs.iter().map(|(k, v)| (k.to_string(), *v)).collect()
    }

    fn preds(source: Source, f: CategoryFlags) -> Predictions {
        Predictions { source, flags: f }
    }

    #[test]
    fn perfect_predictions() {
        let gold = flags(&[("a", true), ("b", false), ("c", true)]);
        let r = score(&preds(Source::Pipeline, gold.clone()), &gold).unwrap();
        assert_eq!((r.accuracy, r.f1, r.precision, r.recall), (100.0, 100.0, 100.0, 100.0));
    }

    #[test]
    fn all_positive_on_497_of_1000() {
        let gold: CategoryFlags = (0..1000).map(|i| (format!("c{i:04}"), i < 497)).collect();
        let all = gold.keys().map(|k| (k.clone(), true)).collect();
        let r = score(&preds(Source::Random, all), &gold).unwrap();
        assert!((r.precision - 49.7).abs() < 1e-9);
        assert_eq!(r.recall, 100.0);
        assert!((r.f1 - 66.399).abs() < 0.01, "{}", r.f1);
    }

    #[test]
    fn no_positives_gives_zero_f1() {
        let gold = flags(&[("a", true), ("b", false)]);
        let r = score(&preds(Source::Random, flags(&[("a", false), ("b", false)])), &gold).unwrap();
        assert_eq!((r.recall, r.f1, r.precision), (0.0, 0.0, 0.0));
        assert_eq!(r.accuracy, 50.0);
    }

    #[test]
    fn universe_mismatch_lists_strays() {
        let gold = flags(&[("a", true), ("b", false)]);
        let err = score(&preds(Source::Naive, flags(&[("a", true), ("z", false)])), &gold).unwrap_err();
        match err {
            Error::Category { strays } => assert_eq!(strays, vec!["b".to_string(), "z".to_string()]),
            e => panic!("{e}"),
        }
    }

    proptest! {
        #[test]
        fn score_is_permutation_invariant(bits in proptest::collection::vec((any::<bool>(), any::<bool>()), 1..40), rot in 0usize..40) {
            let gold: CategoryFlags = bits.iter().enumerate().map(|(i, b)| (format!("k{i:02}"), b.0)).collect();
            let pred: CategoryFlags = bits.iter().enumerate().map(|(i, b)| (format!("k{i:02}"), b.1)).collect();
            let base = score(&preds(Source::Pipeline, pred.clone()), &gold).unwrap();
            // relabel categories by rotating names: same multiset of pairs
            let n = bits.len();
            let names: Vec<String> = (0..n).map(|i| format!("k{:02}", (i + rot) % n)).collect();
            let gold2: CategoryFlags = names.iter().zip(&bits).map(|(k, b)| (k.clone(), b.0)).collect();
            let pred2: CategoryFlags = names.iter().zip(&bits).map(|(k, b)| (k.clone(), b.1)).collect();
            let moved = score(&preds(Source::Pipeline, pred2), &gold2).unwrap();
            prop_assert_eq!((base.tp, base.fp, base.fn_, base.tn), (moved.tp, moved.fp, moved.fn_, moved.tn));
            prop_assert_eq!(base.f1, moved.f1);
        }

        #[test]
        fn oracle_is_always_perfect(bits in proptest::collection::vec(any::<bool>(), 1..30)) {
            let gold: CategoryFlags = bits.iter().enumerate().map(|(i, &b)| (format!("g{i}"), b)).collect();
            let r = score(&oracle_baseline(&gold), &gold).unwrap();
            prop_assert_eq!(r.accuracy, 100.0);
        }
    }

    #[test]
    fn oracle_of_empty_gold_is_empty() {
        assert!(oracle_baseline(&CategoryFlags::new()).flags.is_empty());
    }

    #[test]
    fn random_baseline_limits_and_concentration() {
        let universe: Vec<String> = (0..10_000).map(|i| format!("c{i}")).collect();
        assert!(random_baseline(&universe, 0.0, 1).unwrap().flags.values().all(|&v| !v));
        assert!(random_baseline(&universe, 1.0, 1).unwrap().flags.values().all(|&v| v));
        let half = random_baseline(&universe, 0.5, 7).unwrap();
        let frac = half.flags.values().filter(|&&v| v).count() as f64 / 10_000.0;
        assert!((frac - 0.5).abs() < 0.02, "{frac}");
        assert_eq!(half, random_baseline(&universe, 0.5, 7).unwrap());
        assert!(random_baseline(&universe, 1.5, 7).is_err());
    }

    #[test]
    fn naive_mock_bio_rule() {
        let t = Templates::default();
        let mut a = Archive::in_memory();
        let universe: Vec<String> = ["biology", "medicine", "law", "music"].iter().map(|s| s.to_string()).collect();
        let p = naive_baseline(&MockEndpoint, &mut a, &t, "unlearning bio hazards", &universe).unwrap();
        let pos: Vec<&String> = p.flags.iter().filter(|(_, &v)| v).map(|(k, _)| k).collect();
        assert_eq!(pos, vec!["biology", "medicine"]);
        assert!(matches!(
            naive_baseline(&MockEndpoint, &mut a, &t, "x", &[]),
            Err(Error::Param(_))
        ));
    }

    #[test]
    fn naive_wmdp_style_stays_in_science() {
        let t = Templates::default();
        let mut a = Archive::in_memory();
        let universe: Vec<String> = crate::synthetic::CATEGORY_NAMES.iter().map(|s| s.to_string()).collect();
        let task = "Remove hazardous knowledge about biosecurity, chemical weapons and cyber attacks";
        let p = naive_baseline(&MockEndpoint, &mut a, &t, task, &universe).unwrap();
        let science = ["biology", "chemistry", "physics", "medicine", "computing", "security"];
        for (k, &v) in &p.flags {
            if v {
                assert!(science.contains(&k.as_str()), "{k}");
            }
        }
        assert!(p.flags["biology"]);
    }

    struct Chatty;
    impl Endpoint for Chatty {
        fn complete(&self, _: &str) -> Result<String> {
            Ok("Sure! biology and law".into())
        }
        fn name(&self) -> String {
            "chatty".into()
        }
    }

    #[test]
    fn naive_rejects_unparseable_reply() {
        let t = Templates::default();
        let mut a = Archive::in_memory();
        let err = naive_baseline(&Chatty, &mut a, &t, "x", &["law".to_string()]).unwrap_err();
        match err {
            Error::Completion { raw, .. } => assert!(raw.contains("Sure")),
            e => panic!("{e}"),
        }
    }

    fn dossier(j: usize, cat: Option<&str>) -> FeatureDossier {
        FeatureDossier {
            latent_id: j,
            contexts: vec![],
            description: "d".into(),
            category: cat.map(str::to_string),
            norm_class: NormClass::Shared,
            amp_class: AmpClass::Unchanged,
            error: None,
        }
    }

    fn attr(j: usize, norm: NormClass, amp: AmpClass) -> LatentAttribution {
        LatentAttribution {
            latent_id: j,
            norm_base: 1.0,
            norm_ft: 1.0,
            rel_norm: 0.5,
            norm_class: norm,
            beta_base: Some(1.0),
            beta_ft: Some(1.0),
            amp_class: amp,
            fire_count: 1,
            is_dead: false,
        }
    }

    #[test]
    fn pipeline_rule() {
        let universe: Vec<String> = ["chemistry", "law", "music"].iter().map(|s| s.to_string()).collect();
        let table = vec![
            attr(0, NormClass::BaseSpecific, AmpClass::Unchanged),
            attr(1, NormClass::Shared, AmpClass::Unchanged),
            attr(2, NormClass::Shared, AmpClass::Amplified),
        ];
        let ds = vec![dossier(0, Some("chemistry")), dossier(1, Some("law")), dossier(2, Some("movies")), dossier(3, None)];
        let (p, stats) = pipeline_predictions(&ds, &table, &universe, SelectionRule::default(), &Synonyms::shipped()).unwrap();
        assert!(p.flags["chemistry"]);
        assert!(!p.flags["law"]);
        assert!(!p.flags["music"]);
        assert_eq!(stats.skipped, 1);
        assert_eq!(stats.unmatched_labels["movies"], 1);
        let (p, _) = pipeline_predictions(&ds, &table, &universe, SelectionRule { c: 2 }, &Synonyms::shipped()).unwrap();
        assert!(p.flags.values().all(|&v| !v));
    }

    #[test]
    fn pipeline_with_nothing_selected_is_all_negative() {
        let universe = vec!["law".to_string()];
        let table = vec![attr(0, NormClass::Shared, AmpClass::Unchanged)];
        let (p, _) = pipeline_predictions(&[dossier(0, Some("law"))], &table, &universe, SelectionRule::default(), &Synonyms::default()).unwrap();
        assert!(!p.flags["law"]);
    }

    #[test]
    fn synonyms_resolve() {
        let universe: BTreeSet<String> = ["computing".to_string(), "film".to_string()].into();
        let s = Synonyms::shipped();
        assert_eq!(s.resolve("Computer  Science", &universe).unwrap(), "computing");
        assert_eq!(s.resolve("film", &universe).unwrap(), "film");
        assert!(s.resolve("law", &universe).is_none());
    }

    #[test]
    fn overlap_examples() {
        let set = |v: &[usize]| v.iter().copied().collect::<BTreeSet<usize>>();
        assert_eq!(em_overlap(&set(&[1, 2, 3]), &set(&[2, 3, 4, 5])), Some(0.5));
        assert_eq!(em_overlap(&set(&[1, 2, 3]), &set(&[1, 2])), Some(1.0));
        assert_eq!(em_overlap(&set(&[1]), &set(&[2])), Some(0.0));
        assert_eq!(em_overlap(&set(&[1]), &set(&[])), None);
    }

    #[test]
    fn flag_files_round_trip() {
        let f = flags(&[("organic chemistry", true), ("law", false)]);
        assert_eq!(parse_flags(&flags_to_text(&f)).unwrap(), f);
        assert_eq!(parse_flags("Law , yes\n# c\n").unwrap(), flags(&[("law", true)]));
        assert!(parse_flags("law,maybe").is_err());
        assert!(parse_flags("law,1\nlaw,0").is_err());
    }

    #[test]
    fn table_has_one_row_per_report() {
        let gold = flags(&[("a", true), ("b", false)]);
        let r = score(&oracle_baseline(&gold), &gold).unwrap();
        let t = render_table(&[r]);
        assert!(t.contains("oracle") && t.contains("100.00"));
        assert_eq!(t.lines().count(), 2);
    }
}
