#![allow(dead_code)]

use lfda_core::datagen::TrainSet;
use lfda_core::training::Variant;
use lfda_core::Config;

/// A configuration small enough for many training steps inside a unit test.
pub fn tiny_config(variant: Variant) -> Config {
    let mut c = Config::default();
    c.data.height = 16;
    c.data.width = 32;
    c.data.train_count = 6;
    c.data.val_count = 2;
    c.data.test_count = 2;
    c.net.encoder_channels = vec![4, 8];
    c.net.encoder_strides = vec![1, 2];
    c.net.style_channels = vec![4, 8];
    c.net.decoder_channels = vec![8, 4];
    c.net.generator_channels = vec![8, 4];
    c.net.disc_channels = vec![4];
    c.perceptual.channels = vec![4, 4, 4, 4, 4];
    c.train.variant = variant;
    c.train.batch_size = 2;
    c.train.total_steps = 6;
    c.validate().unwrap();
    c
}

pub fn tiny_data(config: &Config) -> TrainSet {
    TrainSet::generate(&config.data).unwrap()
}

pub mod gradients;
pub mod oracle;
