"""Built-in device profiles.

``s7-like`` is the calibrated default: its idle cycle band is 140 to 300 us.
The rack presets carry the vendor, product and open-port surface of real
controllers; port 502 speaks Modbus/TCP, every other port is an accept-and-
discard stub. Their timing parameters are the calibrated defaults, since
per-vendor timing is not modelled.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

from .device_sim import DeviceProfile

MODBUS_PORT = 502


@dataclass(frozen=True)
class Preset:
    key: str
    profile: DeviceProfile
    ip: str


def _ports(*ports: int) -> tuple[tuple[int, str], ...]:
    return tuple((p, "modbus" if p == MODBUS_PORT else "stub") for p in ports)


_RACK = [
    # key, vendor, product, vendor number, ip, open ports
    ("cpu-1211c", "Siemens", "CPU 1211C", "6ES7211-1AE40-0XB0", "192.168.0.10", (80, 102, 443)),
    ("kp-300", "Siemens", "KP 300", "6AV6647-0AH11-3AX0", "192.168.0.11", (102, 2308)),
    ("ilc-151", "Phoenix", "ILC 151", "2700974", "192.168.0.20", (21, 80, 1962, 41100)),
    ("pm554-t", "ABB", "PM554-T", "1SAP120600R0071", "192.168.0.21", (21, 502, 1200, 1201)),
    ("em4", "Crouzet", "em4 B26-2GS", "88981133", "192.168.0.22", (502, 42424)),
    ("logo-24rce", "Siemens", "LOGO! 24RCE", "6ED1052-1CC01-0BA8", "192.168.0.23", (80, 102, 502, 8080)),
    ("wago-750-889", "Wago", "Controller KNX IP", "750-889", "192.168.0.30", (21, 80, 443, 502, 2455, 6626)),
    ("wago-750-8100", "Wago", "Controller PFC100", "750-8100", "192.168.0.31",
     (22, 80, 443, 502, 4840, 6626, 11740)),
    ("wago-750-880", "Wago", "Controller ETHERNET", "750-880", "192.168.0.32",
     (21, 80, 443, 502, 2455, 6626, 44818)),
    ("wago-750-831", "Wago", "Controller BACnet/IP", "750-831", "192.168.0.33",
     (21, 80, 443, 502, 2455, 6626, 47808)),
    ("tm221ce16t", "Schneider", "TM221CE16T", "TM221CE16T", "192.168.0.50", (502, 44818)),
    ("hmistu855", "Schneider", "HMISTU855", "HMISTU855", "192.168.0.51", (502, 6001)),
    ("openplc", "OpenPLC v2", "Raspberry Pi 3", "Commit f1a2645", "192.168.0.60", (22, 502, 8080, 20000)),
    ("moxa-np5110", "Moxa", "NP5110", "NP5110", "192.168.0.70", (23, 80, 443, 950, 966, 4900)),
]

PRESETS: dict[str, Preset] = {
    "s7-like": Preset("s7-like", DeviceProfile(
        name="s7-like", vendor_label="Siemens", product_label="CPU 1211C",
        listen_ports=_ports(80, 102, 443, MODBUS_PORT), t_exec=140.0, h_max=160.0), "192.168.0.10"),
}
for _key, _vendor, _product, _number, _ip, _open in _RACK:
    PRESETS[_key] = Preset(_key, DeviceProfile(
        name=_product, vendor_label=_vendor, product_label=_number, listen_ports=_ports(*_open)), _ip)


def get_preset(key: str) -> Preset:
    try:
        return PRESETS[key]
    except KeyError:
        raise KeyError(f"unknown profile preset {key!r}; known: {', '.join(sorted(PRESETS))}") from None


def profile_from_preset(key: str, **overrides) -> DeviceProfile:
    return replace(get_preset(key).profile, **overrides)
