use vistabnet::bench::*;
use vistabnet::encoder::{EncoderConfig, LayerRange};
use vistabnet::model::ModelSpec;
use vistabnet::search::{ParamSpec, SearchOptions, SearchSpace};
use vistabnet::synth::MixtureSpec;
use vistabnet::train::TrainConfig;

fn tiny_encoder() -> EncoderSource {
    EncoderSource::Random {
        config: EncoderConfig {
            depth: 2,
            dim: 8,
            heads: 2,
            mlp_ratio: 2.0,
            max_seq: 8,
            patch: 2,
            channels: 1,
            image_hw: (4, 4),
        },
        seed: 3,
    }
}

fn base() -> ExperimentConfig {
    ExperimentConfig {
        datasets: vec![DatasetSource::Mixture {
            spec: MixtureSpec {
                samples: 60,
                features: 4,
                ..MixtureSpec::default()
            },
            seed: 1,
        }],
        seeds: vec![0, 1],
        model: ModelSpec {
            n_views: 2,
            ..ModelSpec::default()
        },
        train: TrainConfig {
            epochs: 2,
            ..TrainConfig::default()
        },
        token_dim: 8,
        ..ExperimentConfig::default()
    }
}

#[test]
fn benchmark_with_search_writes_outputs() {
    let mut cfg = ExperimentConfig {
        search: Some(SearchConfig {
            space: SearchSpace::vistabnet(),
            options: SearchOptions {
                budget: 3,
                parallel: 1,
                ..SearchOptions::default()
            },
        }),
        train: TrainConfig {
            epochs: 1,
            ..TrainConfig::default()
        },
        ..base()
    };
    if let Some(s) = &mut cfg.search {
        for p in &mut s.space.params {
            if p.name == "epochs" {
                p.spec = ParamSpec::Int {
                    low: 1,
                    high: 2,
                    multiple_of: 1,
                };
            }
        }
    }
    let dir = tempfile::tempdir().unwrap();
    let opts = RunOptions {
        deterministic: true,
        checkpoint_dir: Some(dir.path().join("checkpoints")),
        ..RunOptions::default()
    };
    let report = run_benchmark(&cfg, &opts).unwrap();
    assert!(report.failures.is_empty(), "{:?}", report.failures);
    assert_eq!(report.rows.len(), 2);
    assert_eq!(report.trials.len(), 6);
    assert!(report.leak_audit.iter().all(|a| a.test_reads_before_eval == 0));
    write_outputs(&report, dir.path()).unwrap();
    for f in ["report.csv", "report.json", "trials.csv"] {
        assert!(dir.path().join(f).exists(), "{f}");
    }
    let header = std::fs::read_to_string(dir.path().join("trials.csv")).unwrap();
    assert!(header.starts_with("trial_id,lr,proj_lr,epochs,projections,proj_depth,score,seconds"));
    assert_eq!(std::fs::read_dir(dir.path().join("checkpoints")).unwrap().count(), 2);

    let again = run_benchmark(&cfg, &opts).unwrap();
    assert_eq!(again.rows, report.rows);
    assert_eq!(read_report(dir.path().join("report.json")).unwrap(), report);
}

#[test]
fn failing_dataset_does_not_stop_others() {
    let mut cfg = base();
    cfg.datasets.push(DatasetSource::Blobs {
        samples: 3,
        features: 2,
        classes: 3,
        separation: 2.0,
        seed: 0,
    });
    let report = run_benchmark(&cfg, &RunOptions::default()).unwrap();
    assert_eq!(report.rows.len(), 2);
    assert_eq!(report.failures.len(), 2);
}

#[test]
fn fewshot_warns_on_infeasible_shots() {
    let cfg = ExperimentConfig {
        shots: vec![1, 1000],
        ..base()
    };
    let report = run_fewshot(&cfg, &RunOptions::default()).unwrap();
    assert_eq!(report.rows.len(), 2);
    assert!(report.rows.iter().all(|r| r.method == "1-shot"));
    assert_eq!(report.warnings.len(), 2);
    assert!(report.warnings[0].contains("N=1000"));
    let tsv = plot_data(&report, PlotKind::FewshotCurve).unwrap();
    assert_eq!(tsv.lines().count(), 2);
    assert!(tsv.starts_with("shots\tmean_mcc\tstd_mcc"));
}

#[test]
fn ablation_grid_marks_invalid_ranges() {
    let cfg = ExperimentConfig {
        encoder: tiny_encoder(),
        model: ModelSpec {
            n_views: 2,
            ..ModelSpec::default()
        },
        grid: vec![LayerRange::new(0, 2), LayerRange::new(1, 2), LayerRange::new(0, 5)],
        seeds: vec![0],
        ..base()
    };
    let report = run_layer_ablation(&cfg, &RunOptions::default()).unwrap();
    let grid = report.ablation.as_ref().unwrap();
    assert_eq!(grid.cells.len(), 3);
    assert!(grid.cell(0, 2).unwrap().mean_mcc.is_some());
    assert!(grid.cell(0, 5).unwrap().error.is_some());
    let tsv = plot_data(&report, PlotKind::AblationHeatmap).unwrap();
    let lines: Vec<&str> = tsv.lines().collect();
    assert_eq!(lines[0], "start\\end\t2\t5");
    assert!(lines[1].ends_with("\tnan"));
}

#[test]
fn full_grid_counts_pairs() {
    assert_eq!(full_grid(12).len(), 78);
    assert!(full_grid(3).iter().all(|r| r.start < r.end && r.end <= 3));
}

#[test]
fn backbone_study_runs_every_mode() {
    let cfg = ExperimentConfig {
        encoder: tiny_encoder(),
        seeds: vec![0],
        merge_valid: false,
        ..base()
    };
    let report = run_backbone_study(&cfg, &RunOptions::default()).unwrap();
    assert!(report.failures.is_empty(), "{:?}", report.failures);
    let methods: Vec<&str> = report.rows.iter().map(|r| r.method.as_str()).collect();
    assert_eq!(methods, BACKBONE_MODES);
    let ft = report.histories.iter().find(|h| h.method == "frozen+finetune").unwrap();
    assert_eq!(ft.history.finetune_start(), Some(2));
    assert_eq!(report.ranks.len(), 4);
}

#[test]
fn learning_curve_marks_boundary() {
    let cfg = ExperimentConfig {
        encoder: tiny_encoder(),
        seeds: vec![0],
        merge_valid: false,
        train: TrainConfig {
            epochs: 2,
            finetune_epochs: 2,
            ..TrainConfig::default()
        },
        ..base()
    };
    let report = run_benchmark(&cfg, &RunOptions::default()).unwrap();
    let tsv = plot_data(&report, PlotKind::LearningCurve).unwrap();
    let flags: Vec<&str> = tsv.lines().skip(1).map(|l| l.split('\t').nth(2).unwrap()).collect();
    assert_eq!(flags, ["0", "0", "1", "0"]);
    assert!(!tsv.contains("nan"));
}

#[test]
fn missing_series_is_named() {
    let report = run_fewshot(&base(), &RunOptions::default()).unwrap();
    let err = plot_data(&report, PlotKind::AblationHeatmap).unwrap_err();
    assert!(err.to_string().contains("ablation_heatmap"));
}

#[test]
fn config_errors() {
    let cfg = ExperimentConfig::default();
    assert!(cfg.validate(Mode::Benchmark).is_err());
    assert!(base().validate(Mode::AblateLayers).is_err());
    let wrong = ExperimentConfig {
        mode: Some(Mode::Fewshot),
        ..base()
    };
    assert!(wrong.validate(Mode::Benchmark).is_err());
    let bad: Result<ExperimentConfig, _> = serde_json::from_str(r#"{"datasetz": []}"#);
    assert!(bad.is_err());
}

#[test]
fn config_paths_resolve_against_file() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("c.json");
    std::fs::write(
        &path,
        r#"{"datasets": [{"kind": "csv", "path": "d.csv", "schema": "d.json"}]}"#,
    )
    .unwrap();
    let cfg = ExperimentConfig::load(&path).unwrap();
    match &cfg.datasets[0] {
        DatasetSource::Csv { path, .. } => assert_eq!(path, &dir.path().join("d.csv")),
        other => panic!("{other:?}"),
    }
    assert!(cfg.validate(Mode::Benchmark).unwrap_err().to_string().contains("d.csv"));
}

#[test]
fn pretrain_mode_reports_accuracy() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = ExperimentConfig::default();
    let opts = RunOptions {
        checkpoint_dir: Some(dir.path().to_path_buf()),
        ..RunOptions::default()
    };
    let report = run_pretrain(&cfg, &opts).unwrap();
    assert!(report.pretrain.unwrap().train_accuracy >= 0.5);
    assert!(dir.path().join("encoder.weights").exists());
}

#[test]
fn median_of_even_and_odd() {
    assert_eq!(median(&mut [3.0, 1.0, 2.0]), 2.0);
    assert_eq!(median(&mut [4.0, 1.0, 3.0, 2.0]), 2.5);
}
