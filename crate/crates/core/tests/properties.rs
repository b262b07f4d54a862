use proptest::prelude::*;

use npwsim::npw::{self, NpwEnsemble};
use npwsim::oracle::{self, DensityMatrix, FockState, MasterScheme};
use npwsim::stats;
use npwsim::{NpwNoiseCoefficient, SimulationConfig};

fn scheme() -> impl Strategy<Value = MasterScheme> {
    prop_oneof![
        Just(MasterScheme::Euler),
        Just(MasterScheme::Milstein),
        (1usize..5).prop_map(|iterations| MasterScheme::Midpoint { iterations }),
        Just(MasterScheme::Propagator),
    ]
}

fn valid_config() -> impl Strategy<Value = SimulationConfig> {
    (
        0.0f64..4.0,
        0.0f64..6.0,
        -3.2f64..3.2,
        1usize..20,
        1usize..8,
        1e-6f64..1e-2,
        1.0f64..200.0,
        any::<u64>(),
        0.001f64..=1.0,
        any::<bool>(),
    )
        .prop_map(
            |(gamma, amp, phase, batches, per, dt, steps, seed, ess, literal)| SimulationConfig {
                gamma,
                alpha_amplitude: amp,
                alpha_phase: phase,
                n_traj: batches * per,
                batch_count: batches,
                dt,
                t_final: dt * steps.floor(),
                seed,
                fock_cutoff: SimulationConfig::min_fock_cutoff(amp).ceil() as usize + 5,
                ess_fraction_threshold: ess,
                midpoint_iterations: 3,
                npw_noise_coefficient: if literal {
                    NpwNoiseCoefficient::PaperOne
                } else {
                    NpwNoiseCoefficient::DerivedTwo
                },
                record_stride: 1,
            },
        )
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn config_survives_json_round_trip(cfg in valid_config()) {
        let cfg = cfg.validate().unwrap();
        let back = SimulationConfig::from_json_str(&cfg.to_json_string().unwrap()).unwrap();
        prop_assert_eq!(back, cfg);
    }

    #[test]
    fn number_states_are_fixed_points(k in 0usize..20, dw in -0.1f64..0.1, gamma in 0.0f64..5.0, s in scheme()) {
        let mut rho = DensityMatrix::number_state(k, 20).unwrap();
        oracle::step_master(&mut rho, s, dw, 1e-4, gamma).unwrap();
        let fixed = DensityMatrix::number_state(k, 20).unwrap();
        prop_assert_eq!(rho.entries(), fixed.entries());
    }

    #[test]
    fn steps_keep_trace_and_hermiticity(
        amp in 0.0f64..3.0,
        phase in -3.0f64..3.0,
        dws in prop::collection::vec(-0.03f64..0.03, 1..40),
        s in scheme(),
    ) {
        let cutoff = SimulationConfig::min_fock_cutoff(amp).ceil() as usize + 4;
        let rho = oracle::init_coherent_density(amp, phase, cutoff).unwrap();
        let (rho, series) = oracle::run_density_matrix(rho, &dws, 1e-4, 1.0, s, 1).unwrap();
        prop_assert!(series.trace_error.iter().all(|&e| e <= 1e-12));
        prop_assert!(rho.hermiticity_error() <= 1e-12);
        // Only the exponential propagator has a positive factor for every increment.
        if s == MasterScheme::Propagator {
            prop_assert!(rho.populations().iter().all(|&p| p >= -1e-12));
        }
    }

    #[test]
    fn npw_observables_ignore_common_rescale(
        ns in prop::collection::vec(80u64..120, 50),
        dws in prop::collection::vec(-0.02f64..0.02, 20),
        seed in any::<u64>(),
    ) {
        let streams = npwsim::noise::NoiseStreams::new(seed);
        let mut ens = NpwEnsemble::from_numbers(ns.clone()).unwrap();
        let mut dv = vec![0.0; ns.len()];
        for (k, &w) in dws.iter().enumerate() {
            streams.fill_fictitious(npwsim::noise::StreamTag::Fictitious1, 0, k, 1e-4, &mut dv);
            npw::step_npw(&mut ens, w, &dv, 1e-4, 1.0, NpwNoiseCoefficient::DerivedTwo).unwrap();
        }
        prop_assert_eq!(&ens.n, &ns);
        let mut scaled = ens.clone();
        scaled.log_weight.iter_mut().for_each(|l| *l += 1e3f64.ln());
        let close = |a: f64, b: f64| (a - b).abs() <= 1e-9 * a.abs().max(1.0);
        prop_assert!(close(npw::npw_mean_number(&ens).unwrap(), npw::npw_mean_number(&scaled).unwrap()));
        prop_assert!(close(npw::npw_phase_spread(&ens).unwrap(), npw::npw_phase_spread(&scaled).unwrap()));
        prop_assert!(close(
            stats::effective_sample_size(&ens.normalized_weights()),
            stats::effective_sample_size(&scaled.normalized_weights()),
        ));
    }

    #[test]
    fn ess_is_bounded_by_ensemble_size(ws in prop::collection::vec(1e-6f64..1e3, 1..200)) {
        let ess = stats::effective_sample_size(&ws);
        prop_assert!(ess > 0.0 && ess <= ws.len() as f64 * (1.0 + 1e-12));
    }
}
