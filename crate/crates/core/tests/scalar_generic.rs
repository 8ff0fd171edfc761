//! The same pipeline in f32 and f64.

use riddle_core::backends::{Backends, SyntheticConfig};
use riddle_core::latent::sample_password;
use riddle_core::{Encryptor, Encryptor64, EncryptorConfig, Latent, Latent64};

#[test]
fn f32_and_f64_forward_agree() {
    let cfg = EncryptorConfig::toy();
    let a = Encryptor::init(cfg.clone()).unwrap();
    let b = Encryptor64::init(cfg.clone()).unwrap();
    for (name, t) in a.params() {
        let u = &b.params()[name];
        assert!(t.cast::<f64>().max_abs_diff(u) < 1e-6, "{name}");
    }
    for i in 0..4 {
        let w: Latent = Latent::sample(i, cfg.layout, cfg.dim);
        let w64: Latent64 = Latent64::sample(i, cfg.layout, cfg.dim);
        let p = sample_password::<f32>(50 + i, cfg.layout, cfg.dim);
        let p64 = sample_password::<f64>(50 + i, cfg.layout, cfg.dim);
        let y = a.forward(&w, &p).unwrap();
        let y64 = b.forward(&w64, &p64).unwrap();
        assert!(y.values().cast::<f64>().max_abs_diff(y64.values()) < 1e-4);
    }
}

#[test]
fn synthetic_backends_agree_across_precisions() {
    let cfg = EncryptorConfig::toy();
    let b32: Backends<f32> = SyntheticConfig::default().build(cfg.layout, cfg.dim).unwrap();
    let b64: Backends<f64> = SyntheticConfig::default().build(cfg.layout, cfg.dim).unwrap();
    let w: Latent = Latent::sample(3, cfg.layout, cfg.dim);
    let w64: Latent64 = Latent64::sample(3, cfg.layout, cfg.dim);
    let x = b32.generator.generate_value(&w);
    let x64 = b64.generator.generate_value(&w64);
    assert!(x.cast::<f64>().max_abs_diff(&x64) < 1e-5);
    let e = b32.identity.embed_value(&x);
    let e64 = b64.identity.embed_value(&x64);
    assert!(e.cast::<f64>().max_abs_diff(&e64) < 1e-5);
}
