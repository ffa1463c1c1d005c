use std::path::Path;

use gre_core::harness::eval::{self, Enhancer, ManifestRow};
use gre_core::harness::phase_retrieval::harmonic_tone;
use gre_core::harness::{attn_dump, corpus, load_model};
use gre_core::metrics::SI_SDR_CAP_DB;
use gre_core::network::ModelConfig;
use gre_core::signal::degrade::white_noise;
use gre_core::signal::{read_wav, write_wav, DegradationKind, DegradationSpec};

fn row(clean: &str, degraded: &str) -> ManifestRow {
    ManifestRow {
        clean_path: clean.into(),
        degraded_path: degraded.into(),
        kind: None,
        snr_db: None,
        cutoff_hz: None,
    }
}

fn write_pair(dir: &Path, name: &str, clean: &[f64], noise_gain: f64, seed: u64) {
    write_wav(&dir.join(format!("{name}_clean.wav")), clean).unwrap();
    let noisy: Vec<f64> = clean
        .iter()
        .zip(white_noise(clean.len(), seed))
        .map(|(c, n)| c + noise_gain * n)
        .collect();
    write_wav(&dir.join(format!("{name}.wav")), &noisy).unwrap();
}

#[test]
fn identity_on_clean_input_is_perfect() {
    let dir = tempfile::tempdir().unwrap();
    let tone: Vec<f64> = harmonic_tone(3000, 16000).iter().map(|v| 0.3 * v).collect();
    write_wav(&dir.path().join("a.wav"), &tone).unwrap();
    let r = eval::run(&[row("a.wav", "a.wav")], dir.path(), &Enhancer::Identity, 0.3).unwrap();
    let m = r.rows[0].metrics.unwrap();
    assert_eq!(r.enhancer, "identity");
    assert!(m.pd_deg.abs() < 1e-9, "{}", m.pd_deg);
    assert!(m.wopd.abs() < 1e-9);
    assert!(m.si_sdr_db > 100.0 && m.si_sdr_db <= SI_SDR_CAP_DB);
    assert_eq!(r.rows[0].input_metrics, Some(m));
    assert!(r.rows[0].loss_terms.as_ref().unwrap().contains_key("total"));
}

#[test]
fn empty_manifest_gives_empty_report() {
    let r = eval::run(&[], Path::new("."), &Enhancer::Identity, 0.3).unwrap();
    assert!(r.rows.is_empty());
    assert!(r.aggregate.is_none());
    assert_eq!(r.errors, 0);
}

#[test]
fn aggregate_is_the_mean_of_rows_and_errors_are_skipped() {
    let dir = tempfile::tempdir().unwrap();
    let tone: Vec<f64> = harmonic_tone(2500, 16000).iter().map(|v| 0.3 * v).collect();
    for (i, gain) in [0.01, 0.05, 0.2].iter().enumerate() {
        write_pair(dir.path(), &format!("u{i}"), &tone, *gain, i as u64);
    }
    let manifest = dir.path().join("m.csv");
    std::fs::write(
        &manifest,
        "clean_path, degraded_path\nu0_clean.wav, u0.wav\nu1_clean.wav,u1.wav\nmissing.wav,missing.wav\nu2_clean.wav,u2.wav\n",
    )
    .unwrap();
    let rows = eval::read_manifest(&manifest).unwrap();
    assert_eq!(rows.len(), 4);
    let r = eval::run(&rows, dir.path(), &Enhancer::Identity, 0.3).unwrap();
    assert_eq!(r.errors, 1);
    assert!(r.rows[2].error.is_some() && r.rows[2].metrics.is_none());
    let ok: Vec<_> = r.rows.iter().filter_map(|r| r.metrics).collect();
    let agg = r.aggregate.unwrap();
    assert_eq!(agg.count, 3);
    let mean = |f: fn(&eval::Metrics) -> f64| ok.iter().map(f).sum::<f64>() / 3.0;
    assert!((agg.pd_deg - mean(|m| m.pd_deg)).abs() <= 1e-12);
    assert!((agg.wopd - mean(|m| m.wopd)).abs() <= 1e-12);
    assert!((agg.si_sdr_db - mean(|m| m.si_sdr_db)).abs() <= 1e-12);
    // More noise, lower SI-SDR.
    assert!(ok[0].si_sdr_db > ok[1].si_sdr_db && ok[1].si_sdr_db > ok[2].si_sdr_db);
}

#[test]
fn network_eval_reports_both_output_and_input_metrics() {
    let dir = tempfile::tempdir().unwrap();
    let tone: Vec<f64> = harmonic_tone(2000, 16000).iter().map(|v| 0.3 * v).collect();
    write_pair(dir.path(), "n", &tone, 0.05, 9);
    let (net, store) = load_model(ModelConfig::small(), None, 0).unwrap();
    let enhancer = Enhancer::Network { net: &net, store: &store };
    let r = eval::run(&[row("n_clean.wav", "n.wav")], dir.path(), &enhancer, 0.3).unwrap();
    assert_eq!(r.errors, 0);
    let row = &r.rows[0];
    assert!(row.metrics.unwrap().si_sdr_db.is_finite());
    assert!(row.input_metrics.unwrap().si_sdr_db.is_finite());
    assert_eq!(row.utterance, "n");
}

#[test]
fn length_mismatch_is_a_row_error() {
    let dir = tempfile::tempdir().unwrap();
    write_wav(&dir.path().join("a.wav"), &white_noise(1000, 1)).unwrap();
    write_wav(&dir.path().join("b.wav"), &white_noise(900, 2)).unwrap();
    let r = eval::run(&[row("a.wav", "b.wav")], dir.path(), &Enhancer::Identity, 0.3).unwrap();
    assert_eq!(r.errors, 1);
    assert!(r.rows[0].error.as_deref().unwrap().contains("length"));
}

fn attention_fixture() -> (gre_core::network::Network, gre_core::params::ParamStore, Vec<f64>) {
    let (net, store) = load_model(ModelConfig::small(), None, 4).unwrap();
    (net, store, harmonic_tone(1600, 16000))
}

#[test]
fn attention_dump_rows_are_distributions_and_components_add_up() {
    let (net, store, wave) = attention_fixture();
    let export = attn_dump::run(&net, &store, &wave, 1, None).unwrap();
    // Bottleneck runs on the downsampled frequency axis.
    let l = export.len;
    assert!((100..=101).contains(&l), "{l}");
    assert_eq!(export.heads.len(), net.config.n_heads);
    assert!(export.max_row_sum_error() <= 1e-9);
    for h in &export.heads {
        assert_eq!(h.score.len(), l * l);
        assert!(h.score.iter().all(|&s| (0.0..=1.0).contains(&s)));
        for i in 0..h.logit.len() {
            assert!((h.mag_component[i] + h.pha_component[i] - h.logit[i]).abs() <= 1e-12);
        }
    }
    let mut csv = Vec::new();
    export.write_csv(&mut csv).unwrap();
    let text = String::from_utf8(csv).unwrap();
    assert!(text.starts_with("head,row,col,score,mag_component,pha_component\n"));
    assert_eq!(text.lines().count(), 1 + net.config.n_heads * l * l);
}

#[test]
fn attention_dump_is_deterministic_and_frame_dependent() {
    let (net, store, wave) = attention_fixture();
    let a = attn_dump::run(&net, &store, &wave, 0, Some(3)).unwrap();
    let b = attn_dump::run(&net, &store, &wave, 0, Some(3)).unwrap();
    let c = attn_dump::run(&net, &store, &wave, 0, Some(10)).unwrap();
    assert_eq!(a, b);
    assert_ne!(a, c);
}

#[test]
fn attention_dump_rejects_out_of_range_indices() {
    let (net, store, wave) = attention_fixture();
    let n = net.config.n_dual_path;
    assert!(attn_dump::run(&net, &store, &wave, n, None).is_err());
    assert!(attn_dump::run(&net, &store, &wave, 0, Some(17)).is_err());
}

#[test]
fn corpus_degradation_writes_a_readable_manifest() {
    let dir = tempfile::tempdir().unwrap();
    let clean = dir.path().join("clean");
    std::fs::create_dir(&clean).unwrap();
    let tone: Vec<f64> = harmonic_tone(2000, 16000).iter().map(|v| 0.3 * v).collect();
    write_wav(&clean.join("b.wav"), &tone).unwrap();
    write_wav(&clean.join("a.wav"), &tone[..1500]).unwrap();
    std::fs::write(clean.join("notes.txt"), "skip").unwrap();
    let spec = DegradationSpec {
        kind: DegradationKind::Dn,
        snr_db: Some(10.0),
        cutoff_hz: None,
        rir: None,
        rir_t60_ms: None,
        seed: 0,
    };
    let out = dir.path().join("out");
    let rows = corpus::run(&spec, &clean, &out, None, 5).unwrap();
    assert_eq!(rows.len(), 2);
    assert_eq!(rows[0].degraded_path, "a.wav");
    assert!(Path::new(&rows[0].clean_path).is_absolute());
    assert_eq!(rows[0].kind.as_deref(), Some("DN"));
    assert_eq!(eval::read_manifest(&out.join(corpus::MANIFEST_NAME)).unwrap(), rows);
    assert_eq!(read_wav(&out.join("a.wav")).unwrap().len(), 1500);

    let again = dir.path().join("again");
    corpus::run(&spec, &clean, &again, None, 5).unwrap();
    for f in ["a.wav", "b.wav", corpus::MANIFEST_NAME] {
        assert_eq!(std::fs::read(out.join(f)).unwrap(), std::fs::read(again.join(f)).unwrap());
    }

    let r = eval::run(&rows, &out, &Enhancer::Identity, 0.3).unwrap();
    assert_eq!(r.errors, 0);
    let snr = r.aggregate.unwrap().si_sdr_db;
    assert!((snr - 10.0).abs() < 1.0, "{snr}");
}

#[test]
fn corpus_on_empty_directory_writes_header_only() {
    let dir = tempfile::tempdir().unwrap();
    let spec = DegradationSpec {
        kind: DegradationKind::Bwe,
        snr_db: None,
        cutoff_hz: Some(4000.0),
        rir: None,
        rir_t60_ms: None,
        seed: 0,
    };
    let out = dir.path().join("out");
    assert!(corpus::run(&spec, dir.path(), &out, None, 0).unwrap().is_empty());
    let text = std::fs::read_to_string(out.join(corpus::MANIFEST_NAME)).unwrap();
    assert_eq!(text.trim(), "clean_path,degraded_path,kind,snr_db,cutoff_hz");
    assert!(eval::read_manifest(&out.join(corpus::MANIFEST_NAME)).unwrap().is_empty());
}
