//! Compares spacing-increasing and uniform height bins.
//!
//! cargo run --example thresholds -- [a] [b] [k]

use ordsurf::DiscretizationScheme;

fn main() {
    let args: Vec<f64> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let a = args.first().copied().unwrap_or(0.0);
    let b = args.get(1).copied().unwrap_or(40.0);
    let k = args.get(2).copied().unwrap_or(8.0) as usize;
    let sid = DiscretizationScheme::sid(a, b, k).unwrap();
    let ud = DiscretizationScheme::ud(a, b, k).unwrap();

    println!("{:>3}  {:>18}  {:>18}", "bin", "SID edges (m)", "UD edges (m)");
    for d in 0..k {
        let (s0, s1) = sid.bin_edges(d);
        let (u0, u1) = ud.bin_edges(d);
        println!("{d:>3}  {s0:>8.3} .. {s1:>6.3}  {u0:>8.3} .. {u1:>6.3}");
    }

    // a 2 m shed and a 30 m tower, both encoded and decoded again
    for h in [2.0, 30.0] {
        let s = sid.decode(sid.encode(h).unwrap()).unwrap();
        let u = ud.decode(ud.encode(h).unwrap()).unwrap();
        println!("{h:>5.1} m -> SID {s:.3} m, UD {u:.3} m");
    }
}
