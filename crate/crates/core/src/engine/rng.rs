use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Independent random sub-streams of one run. Each concern draws from its
/// own stream, so changing one knob leaves the other draws unchanged.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum Stream {
    PilotQueue = 3,
    DirectSubmit = 4,
    DirectNotify = 5,
    EnvCheck = 6,
    Processing = 7,
    Backoff = 8,
}

#[derive(Debug, Clone)]
pub struct Streams {
    pub pilot_queue: ChaCha8Rng,
    pub direct_submit: ChaCha8Rng,
    pub direct_notify: ChaCha8Rng,
    pub env_check: ChaCha8Rng,
    pub processing: ChaCha8Rng,
    pub backoff: ChaCha8Rng,
}

pub fn stream(seed: u64, s: Stream) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(s as u64);
    rng
}

impl Streams {
    pub fn new(seed: u64) -> Self {
        Streams {
            pilot_queue: stream(seed, Stream::PilotQueue),
            direct_submit: stream(seed, Stream::DirectSubmit),
            direct_notify: stream(seed, Stream::DirectNotify),
            env_check: stream(seed, Stream::EnvCheck),
            processing: stream(seed, Stream::Processing),
            backoff: stream(seed, Stream::Backoff),
        }
    }
}
