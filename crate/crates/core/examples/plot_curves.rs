//! Overlays the KNN curves from metrics logs in one SVG chart.
//!
//! ```text
//! cargo run --release --example plot_curves -- out.svg run_a/metrics.jsonl run_b/metrics.jsonl
//! ```
//!
//! Without logs it plots two made-up curves.

use logo_ssl::metrics::{knn_curve, read_metrics};
use logo_ssl::plot::{line_chart, parse_line_chart, Series};

fn main() -> anyhow::Result<()> {
    let mut args = std::env::args().skip(1);
    let out = args.next().unwrap_or_else(|| "knn_top1.svg".into());
    let logs: Vec<String> = args.collect();

    let series = if logs.is_empty() {
        let curve = |rate: f64| (1..=10).map(|e| (e as f64 * 31.0, 0.1 + 0.5 * (1.0 - (-rate * e as f64).exp()))).collect();
        vec![
            Series {
                label: "baseline".into(),
                points: curve(0.2),
            },
            Series {
                label: "with local affinity".into(),
                points: curve(0.3),
            },
        ]
    } else {
        let mut v = Vec::new();
        for path in &logs {
            let (records, skipped) = read_metrics(path)?;
            for w in skipped {
                eprintln!("{w}");
            }
            v.push(Series {
                label: path.clone(),
                points: knn_curve(&records).into_iter().map(|(s, a)| (s as f64, a)).collect(),
            });
        }
        v
    };

    let svg = line_chart(&series, "KNN top-1 during training", "step", "top-1");
    std::fs::write(&out, &svg)?;
    // The chart embeds exact values, so it can be read back.
    for s in parse_line_chart(&svg) {
        println!("{}: {} points, last {:?}", s.label, s.points.len(), s.points.last());
    }
    println!("wrote {out}");
    Ok(())
}
