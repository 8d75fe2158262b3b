class Unsatisfiable(Exception):
    """A security threshold cannot be met even with everything protected."""

    def __init__(self, message: str, best_accuracy: float):
        self.best_accuracy = best_accuracy
        super().__init__(f"{message} (best achievable accuracy {best_accuracy:.4f})")
