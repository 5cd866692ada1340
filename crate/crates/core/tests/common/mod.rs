/// Exhaustive EER: rates are counted directly at every observed score and
/// one threshold above the maximum; the EER is where the piecewise-linear
/// FAR and FRR curves first meet.
pub fn brute_eer(genuine: &[f64], impostor: &[f64]) -> (f64, f64) {
    let far = |t: f64| impostor.iter().filter(|&&s| s >= t).count() as f64 / impostor.len() as f64;
    let frr = |t: f64| genuine.iter().filter(|&&s| s < t).count() as f64 / genuine.len() as f64;
    let mut ts: Vec<f64> = genuine.iter().chain(impostor).copied().collect();
    ts.sort_by(|a, b| a.partial_cmp(b).unwrap());
    ts.dedup();
    let top = *ts.last().unwrap();
    ts.push(top.next_up());
    for k in 0..ts.len() {
        let (t1, a1, r1) = (ts[k], far(ts[k]), frr(ts[k]));
        if a1 == r1 {
            return (a1, t1);
        }
        if a1 < r1 {
            assert!(k > 0, "FAR below FRR at the lowest score is impossible");
            let (t0, a0, r0) = (ts[k - 1], far(ts[k - 1]), frr(ts[k - 1]));
            // Solve a0 + s (a1 - a0) = r0 + s (r1 - r0).
            let s = (a0 - r0) / ((a0 - r0) - (a1 - r1));
            return (a0 + s * (a1 - a0), t0 + s * (t1 - t0));
        }
    }
    unreachable!()
}
