//! Scores a blurred and a shifted prediction against the same mask.
//!
//! cargo run --example metrics

use ndarray::Array2;
use ugsod::metrics::{evaluate_pair, MetricReport};

fn main() -> ugsod::Result<()> {
    let n = 48;
    let gt = Array2::from_shape_fn((n, n), |(y, x)| ((12..36).contains(&y) && (10..30).contains(&x)) as u8 as f64);
    let soft = Array2::from_shape_fn((n, n), |(y, x)| {
        let dy = (y as f64 - 23.5).abs() - 12.0;
        let dx = (x as f64 - 19.5).abs() - 10.0;
        1.0 / (1.0 + (dy.max(dx) * 0.8).exp())
    });
    let shifted = Array2::from_shape_fn((n, n), |(y, x)| if x >= 6 { gt[[y, x - 6]] } else { 0.0 });

    let mut images = Vec::new();
    for (name, p) in [("exact", &gt), ("soft", &soft), ("shifted", &shifted)] {
        let m = evaluate_pair(name, &p.view(), &gt.view())?;
        println!(
            "{name:<8} MAE {:.4}  E {:.4}  S {:.4}  wF {:.4}",
            m.mae, m.e_measure_mean, m.s_measure, m.weighted_f
        );
        images.push(m);
    }
    let a = MetricReport::from_images(images).aggregate;
    println!("mean     MAE {:.4}  E {:.4}  S {:.4}  wF {:.4}", a.mae, a.e_measure_mean, a.s_measure, a.weighted_f);
    Ok(())
}
