mod common;

use proptest::prelude::*;

use qlan::allocation::{
    objective_value, optimize, predicted_link_rates, ChannelAllocation, LinkBudget, LinkId, Objective, RateModel,
};
use qlan::coincidence::{count_coincidences, estimate_accidentals};
use qlan::optics::Label;
use qlan::qmath::{
    c, eigenvalues, fidelity_with_pure, log_negativity, partial_trace, CMatrix, DensityMatrix2Q, Subsystem, C64,
};
use qlan::rsp::rsp_predict;
use qlan::source::ChannelPairSpec;
use qlan::timetag::{read_stream, stream_to_bytes, Record, TimetagStream};

use common::{kuhn_coincidences, load_config, stream_from_bins};

fn bins(max_len: usize, span: u64) -> impl Strategy<Value = Vec<u64>> {
    prop::collection::vec(0..span, 0..max_len)
}

/// Normalized G·G† from 32 real parameters.
fn density(params: &[f64]) -> DensityMatrix2Q {
    let entries: Vec<C64> = params.chunks(2).map(|p| c(p[0], p[1])).collect();
    let rows: Vec<Vec<C64>> = entries.chunks(4).map(|r| r.to_vec()).collect();
    let g = CMatrix::from_rows(&rows);
    let m = &g * &g.adjoint();
    let tr = m.trace().re;
    DensityMatrix2Q::new(m.scale_real(1.0 / tr)).unwrap()
}

fn state() -> impl Strategy<Value = DensityMatrix2Q> {
    prop::collection::vec(-1.0f64..1.0, 32)
        .prop_filter("non-degenerate", |p| p.iter().map(|x| x * x).sum::<f64>() > 1e-3)
        .prop_map(|p| density(&p))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn sweep_matches_kuhn(
        a in bins(300, 3_000),
        b in bins(300, 3_000),
        delay in -20i64..20,
        window in prop::sample::select(vec![1.0, 5.0, 7.5, 10.0, 20.0]),
        res in prop::sample::select(vec![1_000u32, 5_000]),
    ) {
        let sa = stream_from_bins("A", res, a);
        let sb = stream_from_bins("B", res, b);
        let sweep = count_coincidences(&sa, &sb, delay, window);
        prop_assert_eq!(sweep, kuhn_coincidences(&sa.bins(), &sb.bins(), delay, window, res));
    }

    #[test]
    fn narrower_window_never_counts_more(
        a in bins(400, 5_000),
        b in bins(400, 5_000),
        delay in -10i64..10,
        window in 2.0f64..40.0,
    ) {
        let sa = stream_from_bins("A", 1_000, a);
        let sb = stream_from_bins("B", 1_000, b);
        prop_assert!(
            count_coincidences(&sa, &sb, delay, window / 2.0) <= count_coincidences(&sa, &sb, delay, window)
        );
    }

    #[test]
    fn coincidences_bounded_by_singles(a in bins(200, 2_000), b in bins(200, 2_000), delay in -5i64..5) {
        let sa = stream_from_bins("A", 5_000, a);
        let sb = stream_from_bins("B", 5_000, b);
        let n = count_coincidences(&sa, &sb, delay, 10.0) as usize;
        prop_assert!(n <= sa.len().min(sb.len()));
    }

    #[test]
    fn qltt_round_trip(
        node in "[A-Za-z][A-Za-z0-9_-]{0,15}",
        res in 1u32..100_000,
        mut records in prop::collection::vec((0u64..u64::MAX / 2, 0u8..8), 0..500),
    ) {
        records.sort_unstable();
        let mut s = TimetagStream::new(&node, res);
        s.records = records
            .into_iter()
            .map(|(global_bin, detector_channel)| Record { global_bin, detector_channel })
            .collect();
        let bytes = stream_to_bytes(&s).unwrap();
        prop_assert_eq!(read_stream(bytes.as_slice()).unwrap(), s);
    }

    #[test]
    fn qltt_truncation_is_an_error(len in 0usize..40) {
        let s = stream_from_bins("B", 5_000, vec![3, 9, 27]);
        let bytes = stream_to_bytes(&s).unwrap();
        let cut = len.min(bytes.len() - 1);
        prop_assert!(read_stream(&bytes[..cut]).is_err());
    }

    #[test]
    fn log_negativity_is_nonnegative_and_bounded(rho in state()) {
        let en = log_negativity(&rho).unwrap();
        prop_assert!((-1e-10..=1.0 + 1e-10).contains(&en), "E_N = {}", en);
    }

    #[test]
    fn density_eigenvalues_are_a_distribution(rho in state()) {
        let ev = eigenvalues(rho.matrix()).unwrap();
        prop_assert!(ev.iter().all(|&l| l > -1e-10));
        prop_assert!((ev.iter().sum::<f64>() - 1.0).abs() < 1e-10);
    }

    #[test]
    fn fidelity_is_a_probability(rho in state(), k in 0usize..4) {
        let kets = [
            qlan::qmath::states::psi_plus(),
            qlan::qmath::states::psi_minus(),
            qlan::qmath::states::phi_plus(),
            qlan::qmath::states::phi_minus(),
        ];
        let f = fidelity_with_pure(&rho, &kets[k]).unwrap();
        prop_assert!((-1e-12..=1.0 + 1e-12).contains(&f));
        // the four Bell projectors resolve the identity
        let total: f64 = kets.iter().map(|b| fidelity_with_pure(&rho, b).unwrap()).sum();
        prop_assert!((total - 1.0).abs() < 1e-10);
    }

    #[test]
    fn rsp_outcomes_sum_to_one(rho in state(), first in any::<bool>()) {
        let sender = if first { Subsystem::First } else { Subsystem::Second };
        let receiver = partial_trace(&rho, sender.other());
        for (x, y) in [(Label::H, Label::V), (Label::D, Label::A), (Label::R, Label::L)] {
            let px = rsp_predict(&rho, &CMatrix::outer(&x.ket()), sender).unwrap();
            let py = rsp_predict(&rho, &CMatrix::outer(&y.ket()), sender).unwrap();
            prop_assert!((px.success_probability + py.success_probability - 1.0).abs() < 1e-10);
            for p in [&px, &py] {
                let m = p.state.matrix();
                prop_assert!((m.trace().re - 1.0).abs() < 1e-10);
                prop_assert!(m.max_asymmetry() < 1e-12);
                prop_assert!(eigenvalues(m).unwrap().iter().all(|&l| l > -1e-10));
            }
            // averaging the conditional states over outcomes recovers the marginal
            let avg = &px.state.matrix().scale_real(px.success_probability)
                + &py.state.matrix().scale_real(py.success_probability);
            prop_assert!(avg.max_abs_diff(receiver.matrix()) < 1e-10);
        }
    }
}

fn specs() -> impl Strategy<Value = Vec<ChannelPairSpec>> {
    prop::collection::vec((1e6f64..4e7, 0.0f64..60.0, 0.85f64..0.97), 1..=5).prop_map(|v| {
        v.into_iter()
            .enumerate()
            .map(|(i, (pair_rate, bell_phase_deg, visibility))| ChannelPairSpec {
                index: i + 1,
                pair_rate,
                bell_phase_deg,
                visibility,
                crosstalk_fraction: 0.0,
            })
            .collect()
    })
}

fn budgets(links: &[LinkId], losses: &[f64]) -> Vec<LinkBudget> {
    links
        .iter()
        .zip(losses)
        .map(|(l, &loss)| LinkBudget {
            link: l.clone(),
            loss_db: loss,
            arm_split: 0.5,
            insertion_db: [18.0, 19.0],
            eff: [0.8, 0.2],
        })
        .collect()
}

fn three_links() -> Vec<LinkId> {
    vec![LinkId::new("A", "B"), LinkId::new("B", "C"), LinkId::new("C", "A")]
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(40))]

    #[test]
    fn optimum_dominates_any_assignment(
        specs in specs(),
        losses in prop::collection::vec(0.0f64..8.0, 3),
        assignment in prop::collection::vec(0usize..4, 5),
        total in any::<bool>(),
    ) {
        let links = three_links();
        let budgets = budgets(&links, &losses);
        let model = RateModel::default();
        let objective = if total { Objective::MaxTotalRe } else { Objective::MaxMinRe };
        let best = optimize(objective, &specs, &budgets, &links, &model).unwrap();
        let best_value = objective_value(objective, &predicted_link_rates(&best, &specs, &budgets, &model).unwrap()).unwrap();
        let v: Vec<usize> = assignment[..specs.len()].to_vec();
        let other = ChannelAllocation::from_vector(&links, &v);
        let other_value = objective_value(objective, &predicted_link_rates(&other, &specs, &budgets, &model).unwrap()).unwrap();
        prop_assert!(best_value >= other_value);
    }

    #[test]
    fn more_loss_never_raises_link_rate(
        specs in specs(),
        loss in 0.0f64..10.0,
        extra in 0.1f64..5.0,
    ) {
        let links = vec![LinkId::new("A", "B")];
        let chans: Vec<usize> = specs.iter().map(|s| s.index).collect();
        let alloc = ChannelAllocation::new(vec![(links[0].clone(), chans)]);
        let model = RateModel::default();
        let near = &predicted_link_rates(&alloc, &specs, &budgets(&links, &[loss]), &model).unwrap()[0];
        let far = &predicted_link_rates(&alloc, &specs, &budgets(&links, &[loss + extra]), &model).unwrap()[0];
        prop_assert!(far.coincidence_rate < near.coincidence_rate);
        prop_assert!(far.singles.iter().zip(&near.singles).all(|(f, n)| f < n));
    }
}

#[test]
fn accidental_estimate_is_unbiased_for_independent_streams() {
    use rand::Rng;
    // two independent Poisson streams: expected coincidences are r1·r2·w·T
    let res = 5_000u32;
    let (r1, r2, t_s, w_ns) = (2e5, 3e5, 2.0, 10.0);
    let mut rng = qlan::seed::rng_for(5, &["accidentals"]);
    let span = (t_s * 1e12 / f64::from(res)) as u64;
    let mut draw = |rate: f64| -> Vec<u64> { (0..(rate * t_s) as usize).map(|_| rng.random_range(0..span)).collect() };
    let a = stream_from_bins("A", res, draw(r1));
    let b = stream_from_bins("B", res, draw(r2));
    let expected = a.len() as f64 * b.len() as f64 * w_ns * 1e-9 / t_s;
    let est = estimate_accidentals(&a, &b, 0, w_ns, 8).unwrap();
    let direct = count_coincidences(&a, &b, 0, w_ns) as f64;
    // Poisson error of the 8-window mean and of a single window
    assert!((est - expected).abs() < 4.0 * (expected / 8.0).sqrt(), "{est} vs {expected}");
    assert!((direct - expected).abs() < 4.0 * expected.sqrt(), "{direct} vs {expected}");
}

#[test]
fn allocator_is_deterministic_across_worker_counts() {
    let cfg = load_config("alloc1.toml");
    let links = three_links();
    let budgets = cfg.budgets();
    let model = cfg.rate_model();
    let run = |n: usize| {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build()
            .unwrap()
            .install(|| optimize(Objective::MaxMinRe, &cfg.source.channels, &budgets, &links, &model).unwrap())
    };
    let one = run(1);
    for n in [2, 3, 8] {
        assert_eq!(run(n), one);
    }
}

#[test]
fn shipped_configs_round_trip_through_toml() {
    for name in ["alloc1.toml", "alloc2.toml"] {
        let cfg = load_config(name);
        let again = qlan::config::ExperimentConfig::from_toml(&cfg.to_toml()).unwrap();
        assert_eq!(again, cfg, "{name}");
    }
}
