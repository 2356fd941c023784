use cbin_core::data::gen_gaussian_chain;
use cbin_core::experiment::{run_suite, train_model, MethodModels};
use cbin_core::inference::infer;
use cbin_core::training::Phase;
use cbin_core::{Architecture, Assignment, Checkpoint, InferenceOptions, Method, MetricKind, Mode, ModeChoice, Prepared, TaskSuite, TrainConfig};

fn prepared() -> Prepared {
    Prepared::new(&gen_gaussian_chain(3, 400, 9).0)
}

fn small_cfg(lambda_c: f64) -> TrainConfig {
    TrainConfig {
        lambda_c,
        warmup_epochs: 3,
        epochs: 2,
        inner_iters: 4,
        lr: 0.01,
        seed: 9,
        ..Default::default()
    }
}

#[test]
fn checkpoint_round_trip_preserves_predictions() {
    let p = prepared();
    let arch = Architecture {
        hidden: vec![8],
        ..Default::default()
    };
    let (model, _) = train_model(&p, &arch, &small_cfg(0.2)).unwrap();
    let mut ckpt = Checkpoint::new(model.clone());
    ckpt.standardizer = Some(p.standardizer.clone());
    ckpt.metadata.insert("label".into(), "cbin".into());
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.ckpt");
    ckpt.save(&path).unwrap();
    let back = Checkpoint::load(&path).unwrap();
    assert_eq!(back, ckpt);

    let (tx, tv) = p.test();
    let opts = InferenceOptions::default();
    for (x, v) in tx.iter().zip(&tv).take(10) {
        let a = Assignment::observe(v, &[1]).unwrap();
        let r1 = infer(&model, x, &a, ModeChoice::Auto, &opts).unwrap();
        let r2 = infer(&back.model, x, &a, ModeChoice::Auto, &opts).unwrap();
        assert_eq!(r1, r2);
        assert_eq!(r1.mode, Mode::Hybrid);
    }
}

#[test]
fn composite_run_logs_both_phases() {
    let p = prepared();
    let (_, report) = train_model(&p, &Architecture::linear(), &small_cfg(0.5)).unwrap();
    let phases: Vec<Phase> = report.epochs.iter().map(|e| e.phase).collect();
    assert_eq!(phases, [Phase::Warmup, Phase::Warmup, Phase::Warmup, Phase::Composite, Phase::Composite]);
    assert!(report.epochs[3..].iter().all(|e| e.cl_terms.len() == 2 && e.inner_iterations > 0));
    assert!(report.epochs.iter().all(|e| e.val_joint_nll.is_some()));
    assert_eq!(report.to_json_lines().lines().count(), 5);
}

#[test]
fn suite_covers_every_method_and_task() {
    let p = prepared();
    let (bin, _) = train_model(&p, &Architecture::linear(), &small_cfg(0.0)).unwrap();
    let (cbin, _) = train_model(&p, &Architecture::linear(), &small_cfg(0.5)).unwrap();
    let suite = TaskSuite::all_subsets(3, MetricKind::Rmse);
    let models = MethodModels {
        bin: Some(&bin),
        cbin: Some(&cbin),
        retrain: None,
    };
    let methods = [Method::PriorOnly, Method::RandomInit, Method::Bin, Method::Cbin];
    let table = run_suite(&p, &suite, &methods, &models, &InferenceOptions::default(), ModeChoice::Auto, 0).unwrap();
    assert_eq!(table.cells.len(), 4 * 6);
    assert!(table.cells.iter().all(|c| c.value.is_finite() && c.value > 0.0));
    let wide = table.to_wide_csv();
    assert_eq!(wide.lines().count(), 5);
    // forward-closed tasks never iterate under BIN
    let fwd = table.get(Method::Bin, "v2+v3").unwrap();
    assert_eq!(fwd.mean_iterations, 0.0);
}
