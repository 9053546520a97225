//! Runtime CPU-feature multiversioning for hot elementwise loops.

/// Defines `fn $name<T: Scalar>(..)` whose body is compiled twice: once for the
/// baseline target and once with AVX2/FMA, selected at runtime.
macro_rules! multiversion {
    ($(#[$m:meta])* $vis:vis fn $name:ident<T: Scalar>($($arg:ident : $ty:ty),* $(,)?) $(-> $ret:ty)? $body:block) => {
        $(#[$m])*
        $vis fn $name<T: $crate::tensor::Scalar>($($arg: $ty),*) $(-> $ret)? {
            #[inline(always)]
            fn inner<T: $crate::tensor::Scalar>($($arg: $ty),*) $(-> $ret)? $body
            #[cfg(target_arch = "x86_64")]
            {
                #[target_feature(enable = "avx2,fma")]
                unsafe fn wide<T: $crate::tensor::Scalar>($($arg: $ty),*) $(-> $ret)? {
                    inner($($arg),*)
                }
                if std::is_x86_feature_detected!("avx2") && std::is_x86_feature_detected!("fma") {
                    // SAFETY: the required CPU features were detected at runtime.
                    return unsafe { wide($($arg),*) };
                }
            }
            inner($($arg),*)
        }
    };
}
pub(crate) use multiversion;
