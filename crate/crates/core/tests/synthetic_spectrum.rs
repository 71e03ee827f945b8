//! The generator's site resonance should be visible to an independent FFT
//! peak-picker.

use rustfft::{num_complex::Complex, FftPlanner};
use vs30_core::signal_store::{
    quarter_wavelength_f0, synthesize_dataset, synthesize_record, StationMeta, StrongMotionRecord, SynthConfig,
};

/// Frequency of the largest bin above 0.5 Hz of the three-channel amplitude
/// spectrum, after a ±0.15 Hz moving average that irons out periodogram
/// noise around the resonance.
fn spectral_peak(r: &StrongMotionRecord) -> f64 {
    let n = r.len();
    let mut planner = FftPlanner::new();
    let fft = planner.plan_fft_forward(n);
    let mut amp = vec![0.0; n / 2];
    for ch in &r.channels {
        let mut buf: Vec<Complex<f64>> = ch.iter().map(|&v| Complex::new(v, 0.0)).collect();
        fft.process(&mut buf);
        for (a, c) in amp.iter_mut().zip(&buf) {
            *a += c.norm();
        }
    }
    let df = r.sample_rate / n as f64;
    let half = (0.15 / df).round() as usize;
    let smooth: Vec<f64> = (0..amp.len())
        .map(|i| {
            let (a, b) = (i.saturating_sub(half), (i + half + 1).min(amp.len()));
            amp[a..b].iter().sum::<f64>() / (b - a) as f64
        })
        .collect();
    let lo = (0.5 / df).ceil() as usize;
    let k = (lo..n / 2).max_by(|&a, &b| smooth[a].total_cmp(&smooth[b])).unwrap();
    k as f64 * df
}

fn pearson(x: &[f64], y: &[f64]) -> f64 {
    let n = x.len() as f64;
    let (mx, my) = (x.iter().sum::<f64>() / n, y.iter().sum::<f64>() / n);
    let cov: f64 = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum();
    let vx: f64 = x.iter().map(|a| (a - mx).powi(2)).sum();
    let vy: f64 = y.iter().map(|b| (b - my).powi(2)).sum();
    cov / (vx * vy).sqrt()
}

#[test]
fn vs30_360_peaks_at_3_hz() {
    assert_eq!(quarter_wavelength_f0(360.0), 3.0);
    let station = StationMeta {
        station_id: "S360".into(),
        latitude: 39.0,
        longitude: 35.0,
        vs30: Some(360.0),
        geology_code: 1,
        lithology_code: 1,
    };
    let mut peaks = Vec::new();
    for seed in 0..20 {
        let cfg = SynthConfig {
            seed,
            ..SynthConfig::default()
        };
        let r = synthesize_record(&station, "R", &cfg).unwrap();
        let peak = spectral_peak(&r);
        // the generator's resonance has damping 0.05, so its half-power band
        // is 3 ± 0.15 Hz
        assert!((peak - 3.0).abs() < 0.15, "seed {seed}: peak at {peak} Hz");
        peaks.push(peak);
    }
    let mean = peaks.iter().sum::<f64>() / peaks.len() as f64;
    assert!((mean - 3.0).abs() < 0.05, "mean peak {mean} Hz");
}

#[test]
fn spectral_peak_tracks_quarter_wavelength() {
    let ds = synthesize_dataset(&SynthConfig {
        seed: 11,
        n_stations: 40,
        records_per_station: 2,
        ..SynthConfig::default()
    })
    .unwrap();
    let (mut peaks, mut f0s) = (Vec::new(), Vec::new());
    for r in ds.records() {
        peaks.push(spectral_peak(r));
        f0s.push(quarter_wavelength_f0(ds.record_vs30(r).unwrap()));
    }
    let r = pearson(&peaks, &f0s);
    assert!(r > 0.95, "pearson r = {r}");
}
