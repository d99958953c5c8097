use kdeepc::rng::*;
use rand::Rng;

#[test]
fn streams_are_independent_and_reproducible() {
    let a: u64 = stream(5, Stream::Excitation).random();
    let b: u64 = stream(5, Stream::Restarts).random();
    assert_ne!(a, b);
    assert_eq!(a, stream(5, Stream::Excitation).random::<u64>());
}
