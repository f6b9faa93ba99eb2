use scldpc_core::covevo::second_moment_drift;
use scldpc_core::ensemble::EnsembleSpec;
use scldpc_core::meanevo::{self, compute_ctx, integrate_mean, MeanOptions};
use scldpc_core::peeling::ChannelSpec;

fn main() {
    let spec = EnsembleSpec::plain(3, 6, 20, 6).unwrap();
    let coupling = spec.coupling();
    let state = meanevo::initial_mean(&spec, ChannelSpec::new(0.45).unwrap());
    let ctx = compute_ctx(&state, &coupling);
    let layout = state.layout;
    let f2 = second_moment_drift(&state, &ctx, &coupling);
    let (mut rr, mut vv, mut rv) = (0.0, 0.0, 0.0);
    for &(a, b, val) in &f2.entries {
        let (a, b) = (a as usize, b as usize);
        let w = if a == b { 1.0 } else { 2.0 };
        match (layout.is_var(a), layout.is_var(b)) {
            (false, false) => rr += w * val,
            (true, true) => vv += w * val,
            _ => rv += w * val,
        }
    }
    println!("sums: rr={rr} vv={vv} rv={rv}");

    let spec = EnsembleSpec::plain(3, 6, 50, 6).unwrap();
    let run = integrate_mean(&spec, ChannelSpec::new(0.45).unwrap(), &MeanOptions::default()).unwrap();
    println!("status {:?} clamps {}", run.status, run.clamp_events);
    println!("last taus: {:?}", &run.taus[run.taus.len().saturating_sub(3)..]);
    let (mn, mx) = run.r1_extrema(11.25 - 2.8, 11.25 + 2.8).unwrap();
    println!("window extrema: {mn} {mx} spread {}", mx - mn);
    for t in [5.0, 8.0, 10.0, 11.25, 13.0, 14.0] {
        println!("r1({t}) = {}", run.r1_at(t));
    }
}
