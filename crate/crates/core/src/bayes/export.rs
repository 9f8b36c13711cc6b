use std::io::Write;

use super::PosteriorDraws;

/// Writes one row per kept draw: `chain,draw,` then every parameter.
pub fn write_draws_csv<W: Write>(draws: &PosteriorDraws, out: W) -> Result<(), csv::Error> {
    let mut w = csv::Writer::from_writer(out);
    let mut header = vec!["chain".to_string(), "draw".to_string()];
    header.extend(draws.parameter_names());
    w.write_record(&header)?;
    for (c, chain) in draws.chains.iter().enumerate() {
        for (s, d) in chain.iter().enumerate() {
            let mut row = vec![c.to_string(), s.to_string()];
            row.extend(d.flatten().iter().map(|v| format!("{v:.17e}")));
            w.write_record(&row)?;
        }
    }
    w.flush()?;
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HistogramBin {
    pub lo: f64,
    pub hi: f64,
    pub count: usize,
}

/// Counts of the `λ` draws in `bins` equal-width bins over `range`. The last
/// bin is closed on the right.
pub fn lambda_histogram(draws: &PosteriorDraws, bins: usize, range: (f64, f64)) -> Vec<HistogramBin> {
    let (lo, hi) = range;
    let bins = bins.max(1);
    let width = (hi - lo) / bins as f64;
    let mut counts = vec![0usize; bins];
    for d in draws.iter() {
        if d.lambda < lo || d.lambda > hi {
            continue;
        }
        let k = (((d.lambda - lo) / width) as usize).min(bins - 1);
        counts[k] += 1;
    }
    counts
        .into_iter()
        .enumerate()
        .map(|(k, count)| HistogramBin {
            lo: lo + k as f64 * width,
            hi: lo + (k + 1) as f64 * width,
            count,
        })
        .collect()
}
