use nalgebra::DMatrix;
use rand::Rng;

/// One environment transition.
#[derive(Debug, Clone, PartialEq)]
pub struct TransitionSample {
    pub state: Vec<f64>,
    pub action: [f64; 2],
    pub reward: f64,
    pub next_state: Vec<f64>,
    /// Terminal for bootstrapping (goal or violation, not the step cap).
    pub done: bool,
}

/// Sampled minibatch laid out column-per-sample.
#[derive(Debug, Clone)]
pub struct Batch {
    pub states: DMatrix<f64>,
    pub actions: DMatrix<f64>,
    pub rewards: Vec<f64>,
    pub next_states: DMatrix<f64>,
    pub dones: Vec<bool>,
}

impl Batch {
    pub fn len(&self) -> usize {
        self.rewards.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rewards.is_empty()
    }
}

/// Fixed-capacity ring buffer. Observations are stored as `f32`.
#[derive(Debug, Clone)]
pub struct ReplayBuffer {
    state_dim: usize,
    capacity: usize,
    next: usize,
    len: usize,
    states: Vec<f32>,
    next_states: Vec<f32>,
    actions: Vec<[f64; 2]>,
    rewards: Vec<f64>,
    dones: Vec<bool>,
}

impl ReplayBuffer {
    pub fn new(state_dim: usize, capacity: usize) -> Self {
        assert!(capacity > 0);
        Self {
            state_dim,
            capacity,
            next: 0,
            len: 0,
            states: Vec::new(),
            next_states: Vec::new(),
            actions: Vec::new(),
            rewards: Vec::new(),
            dones: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn push(&mut self, t: &TransitionSample) {
        assert_eq!(t.state.len(), self.state_dim);
        assert_eq!(t.next_state.len(), self.state_dim);
        let d = self.state_dim;
        if self.len < self.capacity {
            self.states.extend(t.state.iter().map(|&v| v as f32));
            self.next_states.extend(t.next_state.iter().map(|&v| v as f32));
            self.actions.push(t.action);
            self.rewards.push(t.reward);
            self.dones.push(t.done);
            self.len += 1;
        } else {
            let i = self.next;
            for (dst, &src) in self.states[i * d..(i + 1) * d].iter_mut().zip(&t.state) {
                *dst = src as f32;
            }
            for (dst, &src) in self.next_states[i * d..(i + 1) * d].iter_mut().zip(&t.next_state) {
                *dst = src as f32;
            }
            self.actions[i] = t.action;
            self.rewards[i] = t.reward;
            self.dones[i] = t.done;
        }
        self.next = (self.next + 1) % self.capacity;
    }

    /// Uniform index draw over the stored transitions.
    pub fn sample_indices<R: Rng + ?Sized>(&self, rng: &mut R, n: usize) -> Vec<usize> {
        assert!(self.len > 0, "cannot sample from an empty buffer");
        (0..n).map(|_| rng.gen_range(0..self.len)).collect()
    }

    pub fn gather(&self, idx: &[usize]) -> Batch {
        let d = self.state_dim;
        let n = idx.len();
        let col = |buf: &[f32], j: usize, i: usize| buf[idx[j] * d + i] as f64;
        Batch {
            states: DMatrix::from_fn(d, n, |i, j| col(&self.states, j, i)),
            actions: DMatrix::from_fn(2, n, |i, j| self.actions[idx[j]][i]),
            rewards: idx.iter().map(|&k| self.rewards[k]).collect(),
            next_states: DMatrix::from_fn(d, n, |i, j| col(&self.next_states, j, i)),
            dones: idx.iter().map(|&k| self.dones[k]).collect(),
        }
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R, n: usize) -> Batch {
        let idx = self.sample_indices(rng, n);
        self.gather(&idx)
    }
}
