use std::fs::File;
use std::io::BufReader;

use synthrad_core::data::parse_metadata;
use synthrad_core::eval::class_balance_report;
use synthrad_core::Error;

use crate::args::BalanceArgs;
use crate::dataset::{write_file, METADATA_FILE};
use crate::error::CliResult;

pub fn report_balance(args: &BalanceArgs) -> CliResult<()> {
    let path = match (&args.metadata, &args.data) {
        (Some(p), _) => p.clone(),
        (None, Some(dir)) => dir.join(METADATA_FILE),
        (None, None) => unreachable!("clap requires --metadata or --data"),
    };
    let file = File::open(&path).map_err(|e| Error::io(&path, e))?;
    let records = parse_metadata(BufReader::new(file))
        .map_err(|e| Error::data(path.display().to_string(), e.to_string()))?;
    let report = class_balance_report(&records);
    println!("{} images, {:.1}% No Finding", report.records, 100.0 * report.no_finding_fraction);
    for ((finding, n), (_, frac)) in report.counts.iter().zip(&report.fractions) {
        if *n > 0 {
            println!("{:<20} {n:>7} {:>6.2}%", finding.label(), 100.0 * frac);
        }
    }
    if !report.co_occurrence.is_empty() {
        println!("co-occurring pairs:");
        for ((a, b), n) in &report.co_occurrence {
            println!("  {} + {}: {n}", a.label(), b.label());
        }
    }
    if let Some(out) = &args.out {
        write_file(out, report.to_csv().as_bytes())?;
    }
    Ok(())
}
