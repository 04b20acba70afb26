from .leak import LeakReport, Verdict, leak_test_for_config, run_dns_leak_test
from .report import emit_report, text_histogram
from .servers import ByteSink, ByteSource, EchoServer, TapSession, TcpTap
from .socks import SocksError, socks_connect, socks_resolve
from .speed import Direction, SpeedReport, ThroughputSample, histogram, run_speed_test
from .testnet import GatewaySpec, RelaySpec, Testnet, TestnetSpec, spawn_testnet

__all__ = [
    "LeakReport", "Verdict", "leak_test_for_config", "run_dns_leak_test", "emit_report", "text_histogram",
    "ByteSink", "ByteSource", "EchoServer", "TapSession", "TcpTap", "SocksError", "socks_connect", "socks_resolve",
    "Direction", "SpeedReport", "ThroughputSample", "histogram", "run_speed_test", "GatewaySpec",
    "RelaySpec", "Testnet", "TestnetSpec", "spawn_testnet",
]
