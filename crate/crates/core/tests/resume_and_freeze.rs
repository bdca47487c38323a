mod common;

#[test]
fn resume_reproduces_uninterrupted_run() {
    let detail = common::resume_matches().unwrap();
    assert!(detail.contains("8 metric rows"), "{detail}");
}

#[test]
fn frozen_blocks_keep_their_bits() {
    common::freeze_holds().unwrap();
}
