use std::collections::HashSet;

use acanet::data::{build_trials, generate_corpus, load_manifest, speakers, CorpusSpec, ManifestEntry};
use acanet::frontend::{log_mel_fbank, read_wav, FbankConfig};

fn spec(n: usize, u: usize, d: f64, seed: u64) -> CorpusSpec {
    CorpusSpec {
        n_speakers: n,
        utts_per_speaker: u,
        duration_s: d,
        sample_rate: 8000,
        seed,
    }
}

#[test]
fn two_speakers_one_second() {
    let dir = tempfile::tempdir().unwrap();
    let c = generate_corpus(&spec(2, 1, 1.0, 0), dir.path()).unwrap();
    assert_eq!(c.all.len(), 2);
    let loaded = load_manifest(&c.manifest_path("manifest")).unwrap();
    assert_eq!(loaded, c.all);
    for e in &loaded {
        let w = read_wav(&e.path).unwrap();
        assert_eq!(w.samples.len(), 8000);
        assert_eq!(w.sample_rate, 8000);
    }
}

#[test]
fn same_seed_same_bytes() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let ca = generate_corpus(&spec(3, 2, 0.5, 9), a.path()).unwrap();
    let cb = generate_corpus(&spec(3, 2, 0.5, 9), b.path()).unwrap();
    for (x, y) in ca.all.iter().zip(&cb.all) {
        assert_eq!(std::fs::read(&x.path).unwrap(), std::fs::read(&y.path).unwrap());
    }
    for split in ["manifest", "train", "dev", "test"] {
        assert_eq!(
            std::fs::read(ca.manifest_path(split)).unwrap(),
            std::fs::read(cb.manifest_path(split)).unwrap()
        );
    }
    let c = tempfile::tempdir().unwrap();
    let cc = generate_corpus(&spec(3, 2, 0.5, 10), c.path()).unwrap();
    assert_ne!(std::fs::read(&ca.all[0].path).unwrap(), std::fs::read(&cc.all[0].path).unwrap());
}

fn argmax_profile(e: &ManifestEntry) -> Vec<usize> {
    let w = read_wav(&e.path).unwrap();
    let f = log_mel_fbank::<f64>(&w, &FbankConfig::default()).unwrap();
    let (c, t) = f.values.dims2().unwrap();
    (0..t)
        .map(|j| (0..c).max_by(|&a, &b| f.values.at(a, j).total_cmp(&f.values.at(b, j))).unwrap())
        .collect()
}

#[test]
fn speakers_have_different_spectral_peaks() {
    let dir = tempfile::tempdir().unwrap();
    let c = generate_corpus(&spec(2, 1, 1.0, 4), dir.path()).unwrap();
    assert_ne!(argmax_profile(&c.all[0]), argmax_profile(&c.all[1]));
}

#[test]
fn splits_hold_out_test_speakers() {
    let dir = tempfile::tempdir().unwrap();
    let c = generate_corpus(&spec(9, 5, 0.3, 1), dir.path()).unwrap();
    let test: HashSet<String> = speakers(&c.test).into_iter().collect();
    assert_eq!(test.len(), 3);
    for e in c.train.iter().chain(&c.dev) {
        assert!(!test.contains(&e.speaker_id));
    }
    assert_eq!(speakers(&c.train), speakers(&c.dev));
    let train_ids: HashSet<&str> = c.train.iter().map(|e| e.utt_id.as_str()).collect();
    assert!(c.dev.iter().all(|e| !train_ids.contains(e.utt_id.as_str())));
    assert_eq!(c.train.len() + c.dev.len() + c.test.len(), 45);
}

#[test]
fn invalid_counts_are_rejected() {
    let dir = tempfile::tempdir().unwrap();
    assert!(generate_corpus(&spec(1, 3, 1.0, 0), dir.path()).is_err());
    assert!(generate_corpus(&spec(3, 0, 1.0, 0), dir.path()).is_err());
}

fn fake(n_spk: usize, n_utt: usize) -> Vec<ManifestEntry> {
    (0..n_spk)
        .flat_map(|s| {
            (0..n_utt).map(move |u| ManifestEntry {
                utt_id: format!("s{s}u{u}"),
                speaker_id: format!("s{s}"),
                path: "x.wav".into(),
                duration_s: 1.0,
            })
        })
        .collect()
}

#[test]
fn trial_counts_and_contract() {
    let m = fake(5, 6);
    let t = build_trials(&m, 100, 0.5, 3).unwrap();
    assert_eq!(t.len(), 100);
    assert_eq!(t.n_target(), 50);
    let ids: HashSet<&str> = m.iter().map(|e| e.utt_id.as_str()).collect();
    let mut seen = HashSet::new();
    for tr in &t.trials {
        assert_ne!(tr.enrol, tr.test);
        assert!(ids.contains(tr.enrol.as_str()) && ids.contains(tr.test.as_str()));
        let key = if tr.enrol < tr.test {
            (tr.enrol.clone(), tr.test.clone())
        } else {
            (tr.test.clone(), tr.enrol.clone())
        };
        assert!(seen.insert(key), "duplicate pair");
        assert_eq!(tr.target, tr.enrol[..2] == tr.test[..2]);
    }
    assert_eq!(build_trials(&m, 100, 0.5, 3).unwrap(), t);
    assert_ne!(build_trials(&m, 100, 0.5, 4).unwrap(), t);
}

#[test]
fn all_target_trials_from_one_speaker() {
    let m = fake(1, 5);
    let t = build_trials(&m, 10, 1.0, 0).unwrap();
    assert!(t.trials.iter().all(|t| t.target));
    assert!(build_trials(&m, 11, 1.0, 0).is_err());
    assert!(build_trials(&m, 2, 0.5, 0).is_err());
}
