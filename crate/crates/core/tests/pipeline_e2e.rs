//! End-to-end runs of the stage graph on a miniature synthetic corpus:
//! artifact layout, resume/skip/force semantics, the no-in-domain-data
//! condition, and stage sharing across sweep conditions.

use std::fs;
use std::path::{Path, PathBuf};

use asrlab::model::load_checkpoint;
use asrlab::pipeline::{
    full_plan, make_toy_corpus, run_plan, run_stage, stage_hash, sweep_supervision,
    PipelineConfig, PipelineError, Stage, StageCtx, StageOutcome, SweepCondition, ToyCorpusSpec,
};
use asrlab::Real;

fn tiny_spec() -> ToyCorpusSpec {
    ToyCorpusSpec {
        read_utts: 10,
        transcribed_cs_utts: 8,
        untranscribed_cs_utts: 10,
        test_utts: 5,
        read_speakers: 3,
        cs_speakers: 3,
        test_speakers: 2,
        ..ToyCorpusSpec::default()
    }
}

fn tiny_overrides(corpus: &Path) -> Vec<String> {
    [
        &format!("shared.corpus_dir={}", corpus.display()),
        "shared.model.enc_layers=2",
        "shared.model.enc_heads=2",
        "shared.model.enc_dim=16",
        "shared.model.enc_ffn=32",
        "shared.model.dec_layers=1",
        "shared.fbank.sample_rate=8000",
        "shared.fbank.num_mel_bins=12",
        "baseline_supervised.train.epochs=1",
        "ssl_pretrain.train.epochs=1",
        "finetune.train.epochs=1",
        "sst_train.train.epochs=1",
        "final_finetune.train.epochs=1",
        "kmeans.k=4",
        "kmeans.max_iters=5",
        "kmeans.max_frames=5000",
        "pseudotranscribe.decode.beam_size=4",
    ]
    .iter()
    .map(|s| s.to_string())
    .collect()
}

fn load_cfg(corpus: &Path, extra: &[&str]) -> PipelineConfig {
    let mut overrides = tiny_overrides(corpus);
    overrides.extend(extra.iter().map(|s| s.to_string()));
    PipelineConfig::load(None, &overrides).unwrap()
}

#[test]
fn full_plan_runs_resumes_and_enforces_markers() {
    let tmp = tempfile::tempdir().unwrap();
    let corpus = tmp.path().join("corpus");
    make_toy_corpus(&corpus, &tiny_spec()).unwrap();
    let exp = tmp.path().join("exp");
    let cfg = load_cfg(&corpus, &[]);
    let ctx = StageCtx::new(&cfg, &exp, false);

    let summary = run_plan(&ctx, &full_plan()).unwrap();
    assert_eq!(summary.executed.len(), 9, "executed: {:?}", summary.executed);
    assert!(summary.skipped.is_empty());

    for stage in Stage::ALL {
        assert!(ctx.marker_path(stage).exists(), "missing marker for {stage}");
    }
    for stage in [
        Stage::BaselineSupervised,
        Stage::SslPretrain,
        Stage::Finetune,
        Stage::SstTrain,
        Stage::FinalFinetune,
    ] {
        assert!(
            ctx.outputs_dir(stage).join("best").is_dir(),
            "missing checkpoint for {stage}"
        );
    }
    assert!(exp.join("reports/baseline_supervised.wer.json").exists());
    assert!(exp.join("reports/final_finetune.wer.json").exists());
    assert!(exp.join("reports/comparison.tsv").exists());

    // The final checkpoint records the whole training lineage.
    let ckpt = load_checkpoint::<Real>(&ctx.outputs_dir(Stage::FinalFinetune).join("best")).unwrap();
    assert_eq!(
        ckpt.provenance.chain(),
        vec!["ssl_pretrain", "finetune", "sst_train", "final_finetune"]
    );

    // A second pass over the same plan does nothing.
    let again = run_plan(&ctx, &full_plan()).unwrap();
    assert_eq!(again.skipped.len(), 9, "skipped: {:?}", again.skipped);
    assert!(again.executed.is_empty());

    // Changing a stage's configuration invalidates its marker...
    let cfg2 = load_cfg(&corpus, &["finetune.train.epochs=2"]);
    let ctx2 = StageCtx::new(&cfg2, &exp, false);
    let err = run_stage(&ctx2, Stage::Finetune).unwrap_err();
    assert!(matches!(err, PipelineError::StaleMarker { ref stage } if stage == "finetune"));
    assert_eq!(err.exit_code(), 2);

    // ...and --force reruns it.
    let forced = StageCtx::new(&cfg2, &exp, true);
    assert_eq!(run_stage(&forced, Stage::Finetune).unwrap(), StageOutcome::Ran);

    // Staleness propagates: the machine-labelling stage hangs off the
    // finetuned model, so its marker no longer matches either.
    let err = run_stage(&ctx2, Stage::SstTrain).unwrap_err();
    assert!(
        matches!(err, PipelineError::StaleMarker { ref stage } if stage == "pseudotranscribe"),
        "unexpected: {err}"
    );

    // Under the original configuration the finetune marker no longer matches.
    let err = run_stage(&ctx, Stage::SstTrain).unwrap_err();
    assert!(matches!(err, PipelineError::StaleMarker { ref stage } if stage == "finetune"));
}

#[test]
fn missing_prerequisite_names_stage_and_artifact() {
    let tmp = tempfile::tempdir().unwrap();
    let corpus = tmp.path().join("corpus");
    make_toy_corpus(&corpus, &tiny_spec()).unwrap();
    let exp = tmp.path().join("exp");
    let cfg = load_cfg(&corpus, &[]);
    let ctx = StageCtx::new(&cfg, &exp, false);
    let err = run_stage(&ctx, Stage::DumpFeatures).unwrap_err();
    match err {
        PipelineError::MissingPrerequisite { stage, artifact } => {
            assert_eq!(stage, "dump_features");
            assert!(artifact.contains("baseline_supervised"), "{artifact}");
        }
        other => panic!("unexpected error: {other}"),
    }
}

#[test]
fn zero_hours_skips_final_adaptation_and_supports_oracle_labels() {
    let tmp = tempfile::tempdir().unwrap();
    let corpus = tmp.path().join("corpus");
    make_toy_corpus(&corpus, &tiny_spec()).unwrap();
    let exp = tmp.path().join("exp");
    // Machine labels come from the sealed answer key through the external
    // transcriber interface, exercising that path end to end.
    let answers = corpus.join("untranscribed_answers.tsv");
    let command = format!(
        "test -s {{manifest}} && \
         printf 'utt_id\\ttext\\tconfidence\\tscore_total\\n' > {{out}} && \
         tail -n +2 {} | awk -F'\\t' '{{print $1\"\\t\"$2\"\\t1.0\\t0.0\"}}' >> {{out}}",
        answers.display()
    );
    let cfg = load_cfg(
        &corpus,
        &[
            "shared.supervised_hours=0.0",
            "pseudotranscribe.transcriber=external_command",
            &format!("pseudotranscribe.external_command={command}"),
        ],
    );
    let ctx = StageCtx::new(&cfg, &exp, false);
    let summary = run_plan(&ctx, &full_plan()).unwrap();
    assert_eq!(summary.executed.len(), 9);

    // No in-domain gold: the last stage passes the previous model through.
    let marker = ctx.read_marker(Stage::FinalFinetune).unwrap().unwrap();
    assert!(
        marker.note.as_deref().unwrap_or("").contains("passed through"),
        "note: {:?}",
        marker.note
    );
    let sst_params = fs::read(ctx.outputs_dir(Stage::SstTrain).join("best/params.bin")).unwrap();
    let final_params =
        fs::read(ctx.outputs_dir(Stage::FinalFinetune).join("best/params.bin")).unwrap();
    assert_eq!(sst_params, final_params);

    // The oracle transcripts all survive the default filter.
    let pseudo = fs::read_to_string(
        ctx.outputs_dir(Stage::Pseudotranscribe).join("pseudo.tsv"),
    )
    .unwrap();
    assert_eq!(pseudo.lines().count(), 1 + tiny_spec().untranscribed_cs_utts);

    // Reports exist even though no stage saw in-domain transcripts.
    assert!(exp.join("reports/comparison.tsv").exists());
}

#[test]
fn sweep_shares_identical_stages_through_the_cache() {
    let tmp = tempfile::tempdir().unwrap();
    let root = tmp.path().join("sweep");
    fs::create_dir_all(&root).unwrap();
    make_toy_corpus(&root.join("corpus"), &tiny_spec()).unwrap();

    // Both conditions resolve to the identical supervised subset (all of it),
    // so every stage except evaluation should be computed once and shared.
    let base: Vec<String> = tiny_overrides(Path::new("corpus"));
    let conditions = vec![
        SweepCondition {
            label: "all".to_string(),
            overrides: vec!["shared.supervised_hours=-1.0".to_string()],
        },
        SweepCondition {
            label: "capped".to_string(),
            // Exactly the whole pool, so the resolved subset matches "all".
            overrides: vec!["shared.supervised_utts=8".to_string()],
        },
    ];
    let outcomes =
        sweep_supervision(None, &base, &conditions, &root, &full_plan(), false).unwrap();
    assert_eq!(outcomes.len(), 2);
    assert!(outcomes[0].error.is_none(), "{:?}", outcomes[0].error);
    assert!(outcomes[1].error.is_none(), "{:?}", outcomes[1].error);
    assert_eq!(outcomes[0].executed, 9);
    assert_eq!(outcomes[1].executed, 1, "only evaluation should rerun");
    assert_eq!(outcomes[1].skipped, 8);

    for stage in Stage::ALL {
        if stage == Stage::Evaluate {
            continue;
        }
        let dir: PathBuf = root.join("conditions/capped/stages").join(stage.name());
        let meta = dir.symlink_metadata().unwrap();
        assert!(meta.file_type().is_symlink(), "{stage} dir should be a symlink");
    }

    // Identical checkpoints must score identically.
    for (stage, wer) in &outcomes[0].wers {
        let other = outcomes[1].wers.get(stage).expect("same conditions scored");
        assert!((wer - other).abs() < 1e-12, "{stage}: {wer} vs {other}");
    }
    let table = fs::read_to_string(root.join("reports/sweep.tsv")).unwrap();
    assert_eq!(table.lines().count(), 3);
    assert!(table.starts_with("label\t"));

    // The shared hashes really are equal across the two configurations.
    let cfg_a = {
        let mut o = base.clone();
        o.push("shared.supervised_hours=-1.0".to_string());
        let mut c = PipelineConfig::load(None, &o).unwrap();
        c.shared.corpus_dir = root.join("corpus");
        c
    };
    let cfg_b = {
        let mut o = base.clone();
        o.push("shared.supervised_utts=8".to_string());
        let mut c = PipelineConfig::load(None, &o).unwrap();
        c.shared.corpus_dir = root.join("corpus");
        c
    };
    let dir_a = root.join("conditions/all");
    let dir_b = root.join("conditions/capped");
    let ctx_a = StageCtx::new(&cfg_a, &dir_a, false);
    let ctx_b = StageCtx::new(&cfg_b, &dir_b, false);
    assert_eq!(
        stage_hash(&ctx_a, Stage::BaselineSupervised).unwrap(),
        stage_hash(&ctx_b, Stage::BaselineSupervised).unwrap()
    );
}
