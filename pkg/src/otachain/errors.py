"""Exception hierarchy.

Every error belongs to one family (one per module). The CLI maps families
to stable exit codes and prints ``<family>: <ErrorName>: <message>``.
"""


class OtaError(Exception):
    family = "otachain"
    exit_code = 1

    @property
    def name(self) -> str:
        return type(self).__name__


class LedgerError(OtaError):
    family = "ledger"
    exit_code = 10


class MultisigError(OtaError):
    family = "multisig"
    exit_code = 11


class RegistryError(OtaError):
    family = "registry"
    exit_code = 12


class StoreError(OtaError):
    family = "store"
    exit_code = 13


class ElementError(OtaError):
    family = "element"
    exit_code = 14


class AgentError(OtaError):
    family = "agent"
    exit_code = 15


class BootloaderError(OtaError):
    family = "bootloader"
    exit_code = 16


class BenchError(OtaError):
    family = "bench"
    exit_code = 17


class WorkspaceError(OtaError):
    family = "workspace"
    exit_code = 18
