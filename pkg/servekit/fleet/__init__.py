from servekit.fleet.controller import Controller, ControllerJournal, \
    JobSpec, ModelRecord, CanaryConfig, NoCapacity, UnknownModel, \
    InvalidVersion, assign, estimate_ram, load_fleet_config
from servekit.fleet.synchronizer import Synchronizer, HttpTransport, \
    InProcessTransport, sync_diff, push_aspired
from servekit.fleet.router import Router, HedgePolicy, CanaryReport, \
    DeadlineExceeded, NoReplicaHasVersion
