use npwsim::noise::{sample_poisson, wiener_increment, NoiseStreams, StreamTag};

fn mean_var(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let m = xs.iter().sum::<f64>() / n;
    let v = xs.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / (n - 1.0);
    (m, v)
}

#[test]
fn wiener_increments_have_the_right_moments() {
    let dt = 1e-4;
    let draws = 1_000_000;
    let w = NoiseStreams::new(2024).measurement();
    let xs: Vec<f64> = (0..draws)
        .map(|k| wiener_increment(&w, k, dt).unwrap())
        .collect();
    let (m, v) = mean_var(&xs);
    assert!(m.abs() <= 4.0 * (dt / draws as f64).sqrt(), "mean {m}");
    assert!((v / dt - 1.0).abs() <= 0.01, "variance {v}");
}

#[test]
fn wiener_increment_rejects_nonpositive_dt() {
    let w = NoiseStreams::new(1).measurement();
    assert!(wiener_increment(&w, 0, 0.0).is_err());
    assert!(wiener_increment(&w, 0, -1e-4).is_err());
}

#[test]
fn poisson_draws_match_rate_and_dispersion() {
    let lambda = 100.0;
    let draws = 100_000;
    let s = NoiseStreams::new(7).stream(StreamTag::InitialNumber, 3);
    let xs: Vec<f64> = (0..draws)
        .map(|k| sample_poisson(lambda, &s, k).unwrap() as f64)
        .collect();
    let (m, v) = mean_var(&xs);
    assert!(
        (m - lambda).abs() <= 3.0 * (lambda / draws as f64).sqrt(),
        "mean {m}"
    );
    assert!((0.95..=1.05).contains(&(v / m)), "dispersion {}", v / m);
}

#[test]
fn poisson_edge_cases() {
    let s = NoiseStreams::new(7).stream(StreamTag::InitialNumber, 0);
    assert!((0..100).all(|k| sample_poisson(0.0, &s, k).unwrap() == 0));
    assert!(sample_poisson(-1.0, &s, 0).is_err());
    assert!(sample_poisson(f64::NAN, &s, 0).is_err());
}

#[test]
fn streams_are_uncorrelated() {
    let streams = NoiseStreams::new(99);
    let n = 200_000u64;
    let w = streams.measurement();
    let v1 = streams.stream(StreamTag::Fictitious1, 0);
    let v2 = streams.stream(StreamTag::Fictitious2, 0);
    let v1b = streams.stream(StreamTag::Fictitious1, 1);
    let other_seed = NoiseStreams::new(100).measurement();
    let draw =
        |s: &npwsim::noise::Stream| -> Vec<f64> { (0..n).map(|k| s.standard_normal(k)).collect() };
    let base = draw(&w);
    for other in [draw(&v1), draw(&v2), draw(&v1b), draw(&other_seed)] {
        let corr = base.iter().zip(&other).map(|(a, b)| a * b).sum::<f64>() / n as f64;
        assert!(corr.abs() < 5.0 / (n as f64).sqrt(), "correlation {corr}");
    }
}

#[test]
fn fictitious_fill_is_chunking_independent() {
    let streams = NoiseStreams::new(5);
    let mut whole = vec![0.0; 3000];
    streams.fill_fictitious(StreamTag::Fictitious1, 0, 17, 1e-4, &mut whole);
    let mut pieces = vec![0.0; 3000];
    for (c, chunk) in pieces.chunks_mut(700).enumerate() {
        streams.fill_fictitious(StreamTag::Fictitious1, c * 700, 17, 1e-4, chunk);
    }
    assert_eq!(whole, pieces);
}

#[test]
fn measurement_path_independent_of_length() {
    let s = NoiseStreams::new(11);
    let short = s.measurement_path(100, 1e-4).unwrap();
    let long = s.measurement_path(1000, 1e-4).unwrap();
    assert_eq!(short[..], long[..100]);
}
