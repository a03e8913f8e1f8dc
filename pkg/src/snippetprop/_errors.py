class SingularMatrixError(ArithmeticError):
    """Raised when LU factorisation meets a pivot below tolerance."""

    def __init__(self, pivot):
        super().__init__(f"matrix is singular to working precision at pivot {pivot}")
        self.pivot = pivot
