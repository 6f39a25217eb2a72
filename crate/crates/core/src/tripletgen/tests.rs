use super::*;
use crate::data::{read_manifest, write_manifest};
use crate::synthetic::{generate, write_dataset, SyntheticSpec};
use ndarray::Array3;
use proptest::prelude::*;
use std::collections::HashMap;
use std::sync::atomic::AtomicUsize;

fn frame(t: f64) -> FrameImage {
    FrameImage::new(Array3::from_elem((4, 4, 3), 0.5), t, "v").unwrap()
}

fn spec_audio() -> Spectrogram {
    Spectrogram::new(ndarray::Array2::zeros((4, 4)), "v").unwrap()
}

struct FailingAt {
    bad: Vec<f64>,
}

impl Captioner for FailingAt {
    fn name(&self) -> &str {
        "failing"
    }
    fn version(&self) -> &str {
        "1"
    }
    fn caption(&self, frame: &FrameImage) -> Result<String> {
        if self.bad.contains(&frame.timestamp_s()) {
            Err(Error::adapter("failing", "boom"))
        } else {
            Ok(format!("frame at {}", frame.timestamp_s()))
        }
    }
}

struct TableScorer(HashMap<String, f64>);

impl AudioTextScorer for TableScorer {
    fn name(&self) -> &str {
        "table"
    }
    fn version(&self) -> &str {
        "1"
    }
    fn score(&self, _: &AudioClip<'_>, caption: &str) -> Result<f64> {
        Ok(self.0[caption])
    }
}

fn clip(a: &Spectrogram) -> AudioClip<'_> {
    AudioClip {
        id: "v",
        spectrogram: a,
        path: None,
    }
}

fn cands(xs: &[(f64, &str)]) -> Vec<(f64, String)> {
    xs.iter().map(|&(t, c)| (t, c.to_string())).collect()
}

#[test]
fn ten_second_video_gives_ten_captions() {
    let picks = sample_frame_indices(10, 1.0, 1.0).unwrap();
    assert_eq!(picks.len(), 10);
    let frames: Vec<_> = picks.iter().map(|&(_, t)| frame(t)).collect();
    let out = caption_frames(&frames, &TimestampCaptioner).unwrap();
    assert_eq!(out.captions.len(), 10);
    for (t, c) in &out.captions {
        assert_eq!(c, &format!("frame at {t}"));
    }
}

#[test]
fn frame_sampling_at_native_rate() {
    let picks = sample_frame_indices(50, 25.0, 1.0).unwrap();
    assert_eq!(picks, vec![(0, 0.0), (25, 1.0)]);
    let picks = sample_frame_indices(4, 1.0, 2.0).unwrap();
    assert_eq!(picks.len(), 8);
    assert_eq!(picks[3], (1, 1.5));
    assert!(sample_frame_indices(4, 1.0, 0.0).is_err());
}

#[test]
fn failing_frame_is_skipped() {
    let frames: Vec<_> = (0..5).map(|t| frame(t as f64)).collect();
    let out = caption_frames(&frames, &FailingAt { bad: vec![2.0] }).unwrap();
    assert_eq!(out.captions.len(), 4);
    assert_eq!(out.skipped.len(), 1);
    assert_eq!(out.skipped[0].0, 2.0);
}

#[test]
fn all_frames_failing_is_video_error() {
    let frames: Vec<_> = (0..2).map(|t| frame(t as f64)).collect();
    let err = caption_frames(&frames, &FailingAt { bad: vec![0.0, 1.0] }).unwrap_err();
    assert!(matches!(err, Error::Adapter { .. }));
    assert!(matches!(
        caption_frames(&[], &TimestampCaptioner).unwrap_err(),
        Error::Parameter(_)
    ));
}

#[test]
fn empty_captions_are_dropped() {
    struct Blank;
    impl Captioner for Blank {
        fn name(&self) -> &str {
            "blank"
        }
        fn version(&self) -> &str {
            "1"
        }
        fn caption(&self, f: &FrameImage) -> Result<String> {
            Ok(if f.timestamp_s() == 0.0 { "  ".into() } else { "ok".into() })
        }
    }
    let out = caption_frames(&[frame(0.0), frame(1.0)], &Blank).unwrap();
    assert_eq!(out.captions, vec![(1.0, "ok".to_string())]);
}

#[test]
fn best_caption_is_argmax() {
    let a = spec_audio();
    let s = TableScorer([("a", 0.2), ("b", 0.9), ("c", 0.4)].iter().map(|&(k, v)| (k.to_string(), v)).collect());
    let best = select_best_caption(&clip(&a), &cands(&[(0.0, "a"), (1.0, "b"), (2.0, "c")]), &s).unwrap();
    assert_eq!(best.caption, "b");
    assert_eq!(best.score, 0.9);
}

#[test]
fn single_candidate_returned() {
    let a = spec_audio();
    let s = TableScorer([("x".to_string(), -0.8)].into_iter().collect());
    let best = select_best_caption(&clip(&a), &cands(&[(4.0, "x")]), &s).unwrap();
    assert_eq!((best.caption.as_str(), best.frame_timestamp_s), ("x", 4.0));
    assert!(matches!(select_best_caption(&clip(&a), &[], &s).unwrap_err(), Error::Parameter(_)));
}

#[test]
fn ties_prefer_earliest_then_lexicographic() {
    let a = spec_audio();
    let s = TableScorer([("p", 0.7), ("q", 0.7), ("r", 0.7)].iter().map(|&(k, v)| (k.to_string(), v)).collect());
    let best = select_best_caption(&clip(&a), &cands(&[(3.0, "p"), (1.0, "q")]), &s).unwrap();
    assert_eq!(best.frame_timestamp_s, 1.0);
    let best = select_best_caption(&clip(&a), &cands(&[(1.0, "r"), (1.0, "q")]), &s).unwrap();
    assert_eq!(best.caption, "q");
}

#[test]
fn out_of_range_score_is_adapter_error() {
    let a = spec_audio();
    let s = TableScorer([("x".to_string(), 1.5)].into_iter().collect());
    assert!(matches!(
        select_best_caption(&clip(&a), &cands(&[(0.0, "x")]), &s).unwrap_err(),
        Error::Adapter { .. }
    ));
}

#[test]
fn stub_adapters_are_deterministic_and_bounded() {
    let f = FrameImage::new(Array3::from_shape_fn((8, 8, 3), |(i, j, c)| ((i + 2 * j + c) % 7) as f64 / 7.0), 0.0, "v").unwrap();
    let c = StatsCaptioner.caption(&f).unwrap();
    assert_eq!(c, StatsCaptioner.caption(&f).unwrap());
    assert!(!c.is_empty());
    let a = spec_audio();
    let s = HashScorer::new(3);
    let x = s.score(&clip(&a), &c).unwrap();
    assert_eq!(x, s.score(&clip(&a), &c).unwrap());
    assert!((-1.0..=1.0).contains(&x));
}

#[test]
fn registry_names() {
    let p = RetryPolicy::default();
    assert_eq!(captioner_by_name("stub-stats", p).unwrap().name(), "stub-stats");
    assert_eq!(scorer_by_name("stub-hash", 0, p).unwrap().name(), "stub-hash");
    assert!(matches!(captioner_by_name("blip2", p).err().unwrap(), Error::Config(_)));
    assert!(matches!(scorer_by_name("clap", 0, p).err().unwrap(), Error::Config(_)));
}

#[cfg(unix)]
#[test]
fn subprocess_adapters() {
    let p = RetryPolicy {
        timeout: Duration::from_secs(10),
        retries: 0,
    };
    let cap = captioner_by_name("cmd:echo a caption for", p).unwrap();
    let out = cap.caption(&frame(0.0)).unwrap();
    assert!(out.starts_with("a caption for "), "{out}");
    let dir = tempfile::tempdir().unwrap();
    let script = dir.path().join("score.sh");
    std::fs::write(&script, "#!/bin/sh\ntest -f \"$1\" && echo 0.25\n").unwrap();
    let sc = SubprocessScorer::new(&format!("sh {}", script.display()), p).unwrap();
    assert_eq!(sc.score(&clip(&spec_audio()), "a dog").unwrap(), 0.25);
    let failing = SubprocessScorer::new("false", p).unwrap();
    let a = spec_audio();
    assert!(matches!(failing.score(&clip(&a), "x").unwrap_err(), Error::Adapter { .. }));
}

#[cfg(unix)]
#[test]
fn subprocess_timeout() {
    let p = RetryPolicy {
        timeout: Duration::from_millis(100),
        retries: 1,
    };
    let dir = tempfile::tempdir().unwrap();
    let script = dir.path().join("slow.sh");
    std::fs::write(&script, "#!/bin/sh\nsleep 5\n").unwrap();
    let cap = SubprocessCaptioner::new(&format!("sh {}", script.display()), p).unwrap();
    let start = Instant::now();
    let err = cap.caption(&frame(0.0)).unwrap_err();
    assert!(err.to_string().contains("timed out"), "{err}");
    assert!(start.elapsed() < Duration::from_secs(3));
}

fn rec(id: &str, score: f64) -> TripletRecord {
    TripletRecord {
        video_id: id.into(),
        audio_ref: format!("{id}.audio.arr"),
        frame_ref: FrameRef {
            path: format!("{id}.frames.arr"),
            timestamp_s: 0.0,
            index: None,
        },
        caption: format!("caption {id}"),
        score,
    }
}

fn manifest(scores: &[f64]) -> Manifest {
    let records = scores
        .iter()
        .enumerate()
        .map(|(i, &s)| rec(&format!("v{i:03}"), s))
        .collect();
    Manifest::new(ManifestHeader::new("t", "test"), records).unwrap()
}

#[test]
fn top_30_of_10() {
    let m = manifest(&(1..=10).map(|i| i as f64 / 10.0).collect::<Vec<_>>());
    let f = filter_top_k(&m, 30.0).unwrap();
    let s: Vec<f64> = f.records.iter().map(|r| r.score).collect();
    assert_eq!(s, vec![1.0, 0.9, 0.8]);
    assert_eq!(f.header.filter_k_percent, Some(30.0));
    assert_eq!(f.header.pre_filter_count, Some(10));
    f.validate().unwrap();
}

#[test]
fn k_100_is_identity_and_range_checked() {
    let m = manifest(&[0.3, 0.1, 0.2]);
    assert_eq!(filter_top_k(&m, 100.0).unwrap().records, m.records);
    assert_eq!(random_subsample(&m, 100.0, 9).unwrap().records, m.records);
    for k in [0.0, -5.0, 100.5, f64::NAN] {
        assert!(matches!(filter_top_k(&m, k).unwrap_err(), Error::Parameter(_)));
        assert!(matches!(random_subsample(&m, k, 0).unwrap_err(), Error::Parameter(_)));
    }
}

#[test]
fn minimum_one_record() {
    let m = manifest(&[0.3, 0.1]);
    assert_eq!(filter_top_k(&m, 10.0).unwrap().len(), 1);
}

#[test]
fn random_subsample_counts_and_seeds() {
    let m = manifest(&(0..10).map(|i| i as f64 / 10.0).collect::<Vec<_>>());
    let a = random_subsample(&m, 30.0, 1).unwrap();
    assert_eq!(a.len(), 3);
    assert_eq!(a.records, random_subsample(&m, 30.0, 1).unwrap().records);
    assert_eq!(a.header.selection, Some(Selection::Random { seed: 1 }));
    let distinct = (2..12)
        .map(|s| random_subsample(&m, 30.0, s).unwrap().records)
        .filter(|r| *r != a.records)
        .count();
    assert!(distinct > 0);
}

fn score_strategy() -> impl Strategy<Value = Vec<i32>> {
    prop::collection::vec(-10i32..=10, 1..40)
}

proptest! {
    #[test]
    fn filter_is_permutation_invariant(scores in score_strategy(), k in 1u32..=100, seed in any::<u64>()) {
        let records: Vec<_> = scores.iter().enumerate().map(|(i, &s)| rec(&format!("v{i:03}"), s as f64 / 10.0)).collect();
        let m = Manifest { header: ManifestHeader::new("t", "x"), records: records.clone() };
        let mut shuffled = records;
        use rand::seq::SliceRandom;
        shuffled.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        let m2 = Manifest { header: ManifestHeader::new("t", "x"), records: shuffled };
        let a = filter_top_k(&m, k as f64).unwrap();
        let b = filter_top_k(&m2, k as f64).unwrap();
        prop_assert_eq!(&a.records, &b.records);
        // subset with boundary ordering
        let kept: std::collections::HashSet<_> = a.records.iter().map(|r| r.video_id.clone()).collect();
        prop_assert_eq!(kept.len(), a.len());
        let min_kept = a.records.last().unwrap();
        for r in m.records.iter().filter(|r| !kept.contains(&r.video_id)) {
            prop_assert!(crate::data::canonical_order(min_kept, r).is_lt());
        }
    }

    #[test]
    fn filter_composition(n in 1usize..60, a in prop::sample::select(vec![10.0, 30.0, 50.0, 80.0, 100.0]), b in prop::sample::select(vec![10.0, 30.0, 50.0, 100.0])) {
        let m = manifest(&(0..n).map(|i| (i as f64 + 1.0) / 100.0).collect::<Vec<_>>());
        let twice = filter_top_k(&filter_top_k(&m, a).unwrap(), b).unwrap();
        let once = filter_top_k(&m, a * b / 100.0).unwrap();
        // nested rounding can keep different counts; the order statistic still nests
        prop_assert!(once.records.starts_with(&twice.records) || twice.records.starts_with(&once.records));
        if once.len() == twice.len() {
            prop_assert_eq!(&once.records, &twice.records);
        }
    }
}

#[test]
fn composition_exact_when_counts_divide() {
    let m = manifest(&(0..100).map(|i| i as f64 / 100.0).collect::<Vec<_>>());
    let twice = filter_top_k(&filter_top_k(&m, 50.0).unwrap(), 30.0).unwrap();
    let once = filter_top_k(&m, 15.0).unwrap();
    assert_eq!(twice.records, once.records);
}

struct Counting<C> {
    inner: C,
    calls: AtomicUsize,
    fail_video: Option<String>,
}

impl<C: Captioner> Captioner for Counting<C> {
    fn name(&self) -> &str {
        self.inner.name()
    }
    fn version(&self) -> &str {
        self.inner.version()
    }
    fn caption(&self, frame: &FrameImage) -> Result<String> {
        self.calls.fetch_add(1, Ordering::SeqCst);
        if self.fail_video.as_deref() == Some(frame.sample_id()) {
            return Err(Error::adapter("counting", "down"));
        }
        self.inner.caption(frame)
    }
}

fn counting(fail: Option<&str>) -> Counting<StatsCaptioner> {
    Counting {
        inner: StatsCaptioner,
        calls: AtomicUsize::new(0),
        fail_video: fail.map(str::to_string),
    }
}

fn corpus(n: usize, dir: &Path) -> Corpus {
    let mut spec = SyntheticSpec::toy(n, 5);
    spec.audio_shape = (8, 8);
    spec.frame_shape = (8, 8, 3);
    let written = write_dataset(&generate(&spec).unwrap(), dir, "toy").unwrap();
    Corpus::load(&written.corpus).unwrap()
}

#[test]
fn three_videos_three_records() {
    let dir = tempfile::tempdir().unwrap();
    let c = corpus(3, dir.path());
    let cap = counting(None);
    let out = build_triplets(&c, &cap, &HashScorer::new(0), &BuildOptions::default()).unwrap();
    assert_eq!(out.manifest.len(), 3);
    assert_eq!(cap.calls.load(Ordering::SeqCst), 9);
    out.manifest.validate().unwrap();
    assert_eq!(out.manifest.header.fps, Some(1.0));
    for r in &out.manifest.records {
        assert!(Path::new(&r.audio_ref).is_absolute());
        let f = crate::data::read_frame_ref(Path::new("/"), &r.frame_ref, &r.video_id).unwrap();
        assert_eq!(f.timestamp_s(), r.frame_ref.timestamp_s);
    }
}

#[test]
fn failing_video_is_excluded_and_journaled() {
    let dir = tempfile::tempdir().unwrap();
    let c = corpus(3, dir.path());
    let journal = dir.path().join("journal.jsonl");
    let opts = BuildOptions {
        journal: Some(journal.clone()),
        ..BuildOptions::default()
    };
    let out = build_triplets(&c, &counting(Some("vid0001")), &HashScorer::new(0), &opts).unwrap();
    assert_eq!(out.manifest.len(), 2);
    assert_eq!(out.failed.len(), 1);
    assert_eq!(out.failed[0].0, "vid0001");
    let j = read_journal(&journal).unwrap();
    assert!(matches!(j["vid0001"], JournalEntry::Failed { .. }));
}

#[test]
fn selected_caption_is_best_of_video() {
    let dir = tempfile::tempdir().unwrap();
    let c = corpus(4, dir.path());
    let scorer = HashScorer::new(2);
    let out = build_triplets(&c, &TimestampCaptioner, &scorer, &BuildOptions::default()).unwrap();
    for r in &out.manifest.records {
        let a = Spectrogram::new(ndarray::Array2::zeros((1, 1)), r.video_id.clone()).unwrap();
        let clip = AudioClip {
            id: &r.video_id,
            spectrogram: &a,
            path: None,
        };
        for t in 0..3 {
            let s = scorer.score(&clip, &format!("frame at {t}")).unwrap();
            assert!(crate::data::quantize_score(s) <= r.score);
        }
    }
}

#[test]
fn resume_after_interrupt_is_idempotent() {
    let dir = tempfile::tempdir().unwrap();
    let c = corpus(6, dir.path());
    let scorer = HashScorer::new(1);
    let reference = build_triplets(&c, &StatsCaptioner, &scorer, &BuildOptions::default()).unwrap();

    let journal = dir.path().join("progress.jsonl");
    let cap = counting(None);
    let first = BuildOptions {
        journal: Some(journal.clone()),
        stop_after: Some(2),
        workers: 1,
        ..BuildOptions::default()
    };
    let err = build_triplets(&c, &cap, &scorer, &first).unwrap_err();
    assert!(matches!(err, Error::Interrupted(2)));
    assert_eq!(cap.calls.load(Ordering::SeqCst), 6);

    let cap2 = counting(None);
    let second = BuildOptions {
        journal: Some(journal.clone()),
        workers: 3,
        ..BuildOptions::default()
    };
    let resumed = build_triplets(&c, &cap2, &scorer, &second).unwrap();
    assert_eq!(cap2.calls.load(Ordering::SeqCst), 12);
    assert_eq!(resumed.newly_processed, 4);
    assert_eq!(resumed.manifest, reference.manifest);
    assert_eq!(
        crate::data::manifest_to_bytes(&resumed.manifest).unwrap(),
        crate::data::manifest_to_bytes(&reference.manifest).unwrap()
    );

    let cap3 = counting(None);
    let again = build_triplets(&c, &cap3, &scorer, &second).unwrap();
    assert_eq!(cap3.calls.load(Ordering::SeqCst), 0);
    assert_eq!(again.manifest, reference.manifest);
}

#[test]
fn truncated_journal_tail_is_ignored() {
    let dir = tempfile::tempdir().unwrap();
    let c = corpus(3, dir.path());
    let journal = dir.path().join("j.jsonl");
    let opts = BuildOptions {
        journal: Some(journal.clone()),
        ..BuildOptions::default()
    };
    let full = build_triplets(&c, &StatsCaptioner, &HashScorer::new(0), &opts).unwrap();
    let text = std::fs::read_to_string(&journal).unwrap();
    let mut lines: Vec<&str> = text.lines().collect();
    let last = lines.pop().unwrap();
    let cut = format!("{}\n{}", lines.join("\n"), &last[..last.len() / 2]);
    std::fs::write(&journal, cut).unwrap();
    assert_eq!(read_journal(&journal).unwrap().len(), 2);
    let again = build_triplets(&c, &StatsCaptioner, &HashScorer::new(0), &opts).unwrap();
    assert_eq!(again.manifest, full.manifest);
}

#[test]
fn output_independent_of_workers() {
    let dir = tempfile::tempdir().unwrap();
    let c = corpus(5, dir.path());
    let run = |w| {
        let opts = BuildOptions {
            workers: w,
            ..BuildOptions::default()
        };
        build_triplets(&c, &StatsCaptioner, &HashScorer::new(4), &opts).unwrap().manifest
    };
    assert_eq!(run(1), run(4));
}

#[test]
fn empty_corpus_is_parameter_error() {
    let c = Corpus {
        path: PathBuf::from("corpus.jsonl"),
        entries: vec![],
    };
    assert!(matches!(
        build_triplets(&c, &StatsCaptioner, &HashScorer::new(0), &BuildOptions::default()).unwrap_err(),
        Error::Parameter(_)
    ));
}

#[test]
fn filtered_manifest_round_trips() {
    let dir = tempfile::tempdir().unwrap();
    let c = corpus(6, dir.path());
    let out = build_triplets(&c, &StatsCaptioner, &HashScorer::new(0), &BuildOptions::default()).unwrap();
    let f = filter_top_k(&out.manifest, 50.0).unwrap();
    let p = dir.path().join("filtered.jsonl");
    write_manifest(&f, &p).unwrap();
    assert_eq!(read_manifest(&p).unwrap(), f);
    let q = score_quantiles(&f).unwrap();
    assert!(q.windows(2).all(|w| w[0] <= w[1]));
}
