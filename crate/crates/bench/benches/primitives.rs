use criterion::{black_box, criterion_group, criterion_main, BenchmarkId, Criterion};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use saltv_core::crypto::{gmac, hkdf, sha256, sign, verify};
use saltv_core::{RevocationFilter, RevocationId, SigningKeyPair, TrustedAuthority, Validity};

fn signatures(c: &mut Criterion) {
    let keys = SigningKeyPair::from_seed(1);
    let msg = [0x5au8; 32];
    let sig = sign(&keys, &msg);
    let ta = TrustedAuthority::from_seed(2);
    let cert = ta.certify(keys.public(), keys.public(), Validity::new(0, 1 << 30).unwrap());

    c.bench_function("ecdsa_sign", |b| b.iter(|| sign(&keys, black_box(&msg))));
    c.bench_function("ecdsa_verify", |b| {
        b.iter(|| verify(keys.public(), black_box(&msg), &sig))
    });
    c.bench_function("cert_verify", |b| b.iter(|| black_box(&cert).verify(ta.public())));
}

fn symmetric(c: &mut Criterion) {
    let key = [3u8; 16];
    let iv = [4u8; 12];
    let aad = [1u8; 26];
    let mut group = c.benchmark_group("gmac");
    for len in [100usize, 300, 1000] {
        let payload = vec![7u8; len];
        group.bench_with_input(BenchmarkId::from_parameter(len), &payload, |b, p| {
            b.iter(|| gmac(&key, &iv, &aad, black_box(p)).unwrap())
        });
    }
    group.finish();
    c.bench_function("sha256_32B", |b| b.iter(|| sha256(&[black_box(&key), &iv])));
    c.bench_function("hkdf_16B", |b| b.iter(|| hkdf(black_box(&key), b"info")));
}

fn bloom(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let probes: Vec<RevocationId> = (0..4096).map(|_| RevocationId(rng.gen())).collect();
    let mut group = c.benchmark_group("bloom_query");
    for n in [1_000u64, 1_000_000] {
        let mut f = RevocationFilter::new(n, 0.001).unwrap();
        for _ in 0..n {
            f.insert(&RevocationId(rng.gen()));
        }
        let mut i = 0usize;
        group.bench_function(BenchmarkId::from_parameter(n), |b| {
            b.iter(|| {
                i = (i + 1) & 4095;
                f.contains(&probes[i])
            })
        });
    }
    group.finish();
}

criterion_group!(benches, signatures, symmetric, bloom);
criterion_main!(benches);
