use intft_train::experiments::{run_one, ExperimentBase, RunPrecision};

fn median(v: &[f64]) -> f64 {
    let mut v = v.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        (v[n / 2 - 1] + v[n / 2]) / 2.0
    }
}

#[test]
fn fp32_baseline_reaches_95_percent() {
    let base = ExperimentBase::default();
    let data = base.load_data().unwrap();
    let m = run_one(&base, &data, RunPrecision::Fp32, 0).unwrap();
    assert!(base.train.steps <= 2000);
    assert!(m.final_metric >= 95.0, "{}", m.final_metric);
    assert!(m.records.windows(2).all(|w| w[0].step < w[1].step));
}

#[test]
fn loss_decreases_for_integer_configs() {
    let base = ExperimentBase::default();
    let data = base.load_data().unwrap();
    let tenth = (base.train.steps / 10) as usize;
    for p in [
        RunPrecision::Int { b: 8, b_act: 8 },
        RunPrecision::Int { b: 12, b_act: 12 },
        RunPrecision::Int { b: 16, b_act: 16 },
        RunPrecision::Int { b: 8, b_act: 12 },
    ] {
        let m = run_one(&base, &data, p, 1).unwrap();
        let l = &m.step_losses;
        let (first, last) = (median(&l[..tenth]), median(&l[l.len() - tenth..]));
        assert!(last < first, "{p:?}: {first} -> {last}");
    }
}
