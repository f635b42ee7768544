use rand::Rng;
use sdh_core::replay::{compress_window, RollingWindow, WindowEntry};
use sdh_core::rng;

fn random_window<R: Rng>(r: &mut R, len: usize) -> Vec<WindowEntry> {
    (0..len)
        .map(|_| WindowEntry {
            s: r.gen_range(0..6),
            a: r.gen_range(0..3),
            r: r.gen_range(-3.0..3.0),
            cost: r.gen_range(0.0..2.0),
            alpha: if r.gen_bool(0.1) { 0.0 } else { r.gen_range(0.0..=1.0) },
            logp: r.gen_range(-4.0..0.0),
        })
        .collect()
}

/// Recomputes the n-step sums from scratch for every prefix.
fn brute_force(w: &[WindowEntry], gamma: f64) -> (f64, f64) {
    let survive = |k: usize| w[..k].iter().fold(1.0, |u, e| u * (gamma * e.alpha));
    let r_n = (0..w.len()).fold(0.0, |acc, k| acc + survive(k) * (w[k].alpha * w[k].r));
    (r_n, survive(w.len()))
}

#[test]
fn compressed_windows_match_brute_force_bitwise() {
    let mut r = rng::stream(2024, 0);
    for _ in 0..10_000 {
        let len = r.gen_range(1..=8);
        let gamma = r.gen_range(0.5..0.999);
        let w = random_window(&mut r, len);
        let done = r.gen_bool(0.3);
        let rec = compress_window(&w, 4, done, gamma).unwrap();
        let (r_n, u) = brute_force(&w, gamma);
        assert_eq!(rec.r_n.to_bits(), r_n.to_bits());
        assert_eq!(rec.u_boot.to_bits(), u.to_bits());
        assert_eq!((rec.s, rec.a, rec.steps, rec.done), (w[0].s, w[0].a, len, done));
    }
}

#[test]
fn rolling_window_emits_every_suffix_at_episode_end() {
    let mut r = rng::stream(7, 0);
    for episode in 0..500 {
        let n = r.gen_range(1..=6);
        let gamma = 0.95;
        let len = r.gen_range(1..=15);
        let steps = random_window(&mut r, len);
        let terminal = episode % 2 == 0;
        let mut win = RollingWindow::new(n, gamma).unwrap();
        let mut out = Vec::new();
        for (t, e) in steps.iter().enumerate() {
            if t + 1 == len {
                out.extend(win.end_episode(e.clone(), 9, terminal).unwrap());
            } else {
                out.extend(win.push(e.clone(), steps[t + 1].s).unwrap());
            }
        }
        assert_eq!(out.len(), len);
        for (t, rec) in out.iter().enumerate() {
            let end = (t + n).min(len);
            let (r_n, u) = brute_force(&steps[t..end], gamma);
            assert_eq!(rec.r_n.to_bits(), r_n.to_bits());
            assert_eq!(rec.u_boot.to_bits(), u.to_bits());
            assert_eq!(rec.steps, end - t);
            assert_eq!(rec.done, end == len && terminal);
            let boot = if end == len { 9 } else { steps[end].s };
            assert_eq!(rec.s_boot, boot);
        }
    }
}

#[test]
fn shortened_windows_satisfy_the_sum_identity() {
    // R_k = alpha_0 r_0 + gamma alpha_0 R_{k-1}(window[1..]) for every suffix.
    let mut r = rng::stream(8, 0);
    for _ in 0..2_000 {
        let len = r.gen_range(2..=6);
        let gamma = r.gen_range(0.5..0.99);
        let w = random_window(&mut r, len);
        let full = compress_window(&w, 0, true, gamma).unwrap();
        let tail = compress_window(&w[1..], 0, true, gamma).unwrap();
        let lhs = full.r_n;
        let rhs = w[0].alpha * w[0].r + gamma * w[0].alpha * tail.r_n;
        assert!((lhs - rhs).abs() <= 1e-12 * (1.0 + lhs.abs()), "{lhs} vs {rhs}");
        assert!((full.u_boot - gamma * w[0].alpha * tail.u_boot).abs() <= 1e-15);
    }
}
