use attnpair_demo::{train_curve, DemoPrompt};

#[test]
fn grid_prompt_view_and_mining() {
    let p = DemoPrompt::new("grid", 4, 3, 1).unwrap_or_else(|_| panic!("compose"));
    assert_eq!((p.width(), p.height()), (64, 64));
    assert_eq!(p.rgba().len(), 64 * 64 * 4);
    assert_eq!(
        p.rects(),
        [0, 0, 32, 32, 32, 0, 32, 32, 0, 32, 32, 32, 32, 32, 32, 32]
    );
    assert!(p.question().starts_with("In Image3, "));
    let m = p.mine(3, 1.0, 2).unwrap_or_else(|_| panic!("mine"));
    assert_eq!(m.ratios().len(), 3);
    assert_eq!(m.masses().len(), 12);
    assert!(m.ratios().iter().all(|r| (0.0..=1.0).contains(r)));
    assert!(m.selected() >= -1 && m.selected() < 3);
}

#[test]
fn sequence_strip_and_pip() {
    let s = DemoPrompt::new("sequence", 3, 1, 0).unwrap_or_else(|_| panic!("sequence"));
    assert_eq!((s.width(), s.height()), (96, 32));
    let p = DemoPrompt::new("pip", 2, 2, 0).unwrap_or_else(|_| panic!("pip"));
    assert_eq!(&p.rects()[4..], &[8, 8, 16, 16]);
}

#[test]
fn curve_starts_at_ln2() {
    let c = train_curve(8, 1, 0.1, 0.1, 0.01, 3).unwrap_or_else(|_| panic!("train"));
    assert_eq!(c.len(), 3);
    assert!((c[0] - std::f64::consts::LN_2).abs() < 1e-9);
}
