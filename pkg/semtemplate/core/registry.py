from typing import Dict, Callable, Any, List, Optional
import inspect
import logging

logger = logging.getLogger(__name__)


class Registry:
    """Named callables with metadata, registered by decorator"""

    def __init__(self, kind: str = "entry"):
        self.kind = kind
        self._entries: Dict[str, Callable] = {}
        self._metadata: Dict[str, Dict[str, Any]] = {}

    def register(self, name: str, func: Callable, description: str = "", **metadata: Any) -> None:
        """Register a callable under a unique name"""
        if name in self._entries:
            raise ValueError(f"{self.kind.capitalize()} '{name}' is already registered")
        self._entries[name] = func
        self._metadata[name] = {
            "description": description or (inspect.getdoc(func) or "").split("\n")[0],
            "async": inspect.iscoroutinefunction(func),
            **metadata,
        }
        logger.debug(f"Registered {self.kind}: {name}")

    def entry(self, name: str, description: str = "", **metadata: Any):
        """Decorator to register a callable"""
        def decorator(func: Callable):
            self.register(name, func, description, **metadata)
            return func
        return decorator

    def get(self, name: str) -> Callable:
        if name not in self._entries:
            raise KeyError(f"{self.kind.capitalize()} '{name}' not found in registry")
        return self._entries[name]

    def metadata(self, name: str) -> Dict[str, Any]:
        self.get(name)
        return self._metadata[name]

    async def execute(self, name: str, *args, **kwargs) -> Any:
        """Run an entry by name, awaiting it if it is a coroutine function"""
        func = self.get(name)
        try:
            if self._metadata[name]["async"]:
                result = await func(*args, **kwargs)
            else:
                result = func(*args, **kwargs)
            logger.debug(f"{self.kind.capitalize()} '{name}' executed successfully")
            return result
        except Exception as e:
            logger.error(f"{self.kind.capitalize()} '{name}' failed: {e}")
            raise

    def names(self) -> List[str]:
        return list(self._entries)

    def items(self) -> List[tuple]:
        return [(name, self._entries[name], self._metadata[name]) for name in self._entries]

    def has(self, name: str) -> bool:
        """Check if an entry exists"""
        return name in self._entries

    def __contains__(self, name: str) -> bool:
        return name in self._entries


class LossTermRegistry(Registry):
    """Loss terms keyed by breakdown name, each bound to a weight in LossWeights"""

    def __init__(self):
        super().__init__(kind="loss term")

    def term(
        self,
        name: str,
        weight: Optional[str] = None,
        pairwise: bool = False,
        batch: bool = False,
        description: str = "",
    ):
        """
        Decorator for a loss term; ``weight`` names its LossWeights coefficient.

        Shape terms are averaged over the shapes of a batch, pairwise terms over
        the shape pairs, and batch terms see every shape at once.
        """
        scope = "pair" if pairwise else "batch" if batch else "shape"
        return self.entry(name, description, weight=weight, scope=scope)

    def pairwise_terms(self) -> List[str]:
        return [name for name, _, meta in self.items() if meta["scope"] == "pair"]


# Global registries
loss_terms = LossTermRegistry()
stage_registry = Registry(kind="stage")
