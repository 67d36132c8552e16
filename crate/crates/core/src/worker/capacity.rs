use parking_lot::Mutex;

use crate::model::Resources;

/// What a task reserves while it runs. Absent fields default to one core
/// and one gigabyte.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Reservation {
    pub cpu_cores: u64,
    /// RAM in whole megabytes, so bookkeeping stays exact.
    pub ram_mb: u64,
}

impl Reservation {
    pub fn for_resources(resources: Option<&Resources>) -> Self {
        let cpu_cores = resources
            .and_then(|r| r.cpu_cores)
            .map_or(1, |n| n.max(1) as u64);
        let ram_gb = resources.and_then(|r| r.ram_gb).unwrap_or(1.0);
        Reservation {
            cpu_cores,
            ram_mb: gb_to_mb(ram_gb),
        }
    }
}

fn gb_to_mb(gb: f64) -> u64 {
    (gb * 1024.0).ceil().max(0.0) as u64
}

#[derive(Debug, Default)]
struct Usage {
    cpu_cores: u64,
    ram_mb: u64,
}

/// Node capacity with reservation bookkeeping. Reservations are accounting
/// only; nothing is enforced on the running processes.
#[derive(Debug)]
pub struct Capacity {
    total_cpu_cores: u64,
    total_ram_mb: u64,
    in_use: Mutex<Usage>,
}

impl Capacity {
    pub fn new(total_cpu_cores: u64, total_ram_gb: f64) -> Self {
        Capacity {
            total_cpu_cores,
            total_ram_mb: gb_to_mb(total_ram_gb),
            in_use: Mutex::new(Usage::default()),
        }
    }

    /// Reserve `request` if it fits in what is free.
    pub fn admit(&self, request: Reservation) -> bool {
        let mut usage = self.in_use.lock();
        let fits = usage.cpu_cores + request.cpu_cores <= self.total_cpu_cores
            && usage.ram_mb + request.ram_mb <= self.total_ram_mb;
        if fits {
            usage.cpu_cores += request.cpu_cores;
            usage.ram_mb += request.ram_mb;
        }
        fits
    }

    pub fn release(&self, reservation: Reservation) {
        let mut usage = self.in_use.lock();
        usage.cpu_cores = usage.cpu_cores.saturating_sub(reservation.cpu_cores);
        usage.ram_mb = usage.ram_mb.saturating_sub(reservation.ram_mb);
    }

    pub fn total_cpu_cores(&self) -> u64 {
        self.total_cpu_cores
    }

    pub fn total_ram_gb(&self) -> f64 {
        self.total_ram_mb as f64 / 1024.0
    }

    pub fn in_use_cpu_cores(&self) -> u64 {
        self.in_use.lock().cpu_cores
    }

    pub fn in_use_ram_gb(&self) -> f64 {
        self.in_use.lock().ram_mb as f64 / 1024.0
    }

    pub fn free_cpu_cores(&self) -> u64 {
        self.total_cpu_cores - self.in_use_cpu_cores()
    }
}
